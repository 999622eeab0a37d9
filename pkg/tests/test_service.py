import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from caplab.cli import main
from caplab.corpus import default_grammar
from caplab.posgen import POS_TAGS
from caplab.service import build_app


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    cfg = {
        "seed": 3,
        "grammar": default_grammar(content_dim=8, motion_dim=6,
                                   pad_len=5).to_dict(),
        "model": {"hidden": 16, "embed_dim": 12, "attn_dim": 10,
                  "fused_dim": 14, "max_words": 8},
        "train": {"epochs": 2, "batch_size": 4, "patience": 2},
    }
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    data = root / "corpus"
    ckpt = root / "xe.ckpt"
    assert main(["synth", "--config", str(cfg_path), "--out", str(data),
                 "--n-train", "8", "--n-val", "2", "--n-test", "2"]) == 0
    assert main(["train-pos", "--config", str(cfg_path), "--data", str(data),
                 "--out", str(root / "pos.ckpt")]) == 0
    assert main(["train-xe", "--config", str(cfg_path), "--data", str(data),
                 "--init-from", str(root / "pos.ckpt"),
                 "--out", str(ckpt)]) == 0
    return str(ckpt), str(data)


@pytest.fixture()
def client(setup):
    ckpt, data = setup
    with TestClient(build_app(ckpt, data)) as c:
        yield c


def test_health(client):
    r = client.get("/v1/health")
    assert r.status_code == 200
    doc = r.json()
    assert doc["status"] == "ok"
    assert len(doc["checkpoint_hash"]) == 16
    assert doc["model_config"]["hidden"] == 16


def test_clips_listing(client):
    doc = client.get("/v1/clips").json()
    rows = doc["clips"]
    assert {r["split"] for r in rows} == {"train", "val", "test"}
    assert sum(r["split"] == "train" for r in rows) == 8
    assert all(r["clip_id"] for r in rows)


def test_pos_rows_normalized(client):
    r = client.post("/v1/pos", json={"clip_id": "val_0000"})
    assert r.status_code == 200
    doc = r.json()
    assert all(t in POS_TAGS for t in doc["tags"])
    att = np.asarray(doc["per_step_attention"])
    assert att.shape[0] == len(doc["tags"])
    assert np.allclose(att.sum(axis=1), 1.0, atol=1e-6)


def test_caption_basic_and_deterministic(client):
    body = {"clip_id": "test_0000", "beam_width": 2}
    a = client.post("/v1/caption", json=body)
    b = client.post("/v1/caption", json=body)
    assert a.status_code == 200
    assert a.content == b.content
    doc = a.json()
    assert set(doc) >= {"tokens", "tags_used", "logprob",
                        "per_step_attention"}
    att = np.asarray(doc["per_step_attention"])
    assert np.allclose(att.sum(axis=1), 1.0, atol=1e-6)


def test_caption_with_overrides(client):
    doc = client.post("/v1/caption", json={
        "clip_id": "val_0000",
        "overrides": [{"op": "set", "position": 0, "tag": "NUM"}],
    }).json()
    assert doc["edited"] is True
    assert doc["tags_used"][0] == "NUM"


def test_caption_matches_initial_session_caption(client):
    cap = client.post("/v1/caption", json={"clip_id": "val_0001"}).json()
    ses = client.post("/v1/sessions", json={"clip_id": "val_0001"}).json()
    assert ses["caption"]["tokens"] == cap["tokens"]
    assert ses["caption"]["logprob"] == cap["logprob"]
    assert ses["tags"] == cap["tags_used"]


def test_unknown_clip_404(client):
    for path, body in (("/v1/pos", {"clip_id": "zzz"}),
                       ("/v1/caption", {"clip_id": "zzz"}),
                       ("/v1/sessions", {"clip_id": "zzz"})):
        r = client.post(path, json=body)
        assert r.status_code == 404
        assert "zzz" in r.json()["detail"]["message"]


def test_invalid_tag_lists_valid_tags(client):
    r = client.post("/v1/caption", json={
        "clip_id": "val_0000",
        "overrides": [{"op": "set", "position": 0, "tag": "XYZ"}],
    })
    assert r.status_code == 422
    assert r.json()["detail"]["valid_tags"] == list(POS_TAGS)

    sid = client.post("/v1/sessions",
                      json={"clip_id": "val_0000"}).json()["session_id"]
    r = client.post(f"/v1/sessions/{sid}/edits",
                    json={"op": "set", "position": 0, "tag": "XYZ"})
    assert r.status_code == 422
    assert r.json()["detail"]["valid_tags"] == list(POS_TAGS)


def test_invalid_position_and_op_422(client):
    sid = client.post("/v1/sessions",
                      json={"clip_id": "val_0000"}).json()["session_id"]
    r = client.post(f"/v1/sessions/{sid}/edits",
                    json={"op": "set", "position": 999, "tag": "NOUN"})
    assert r.status_code == 422
    assert "position" in r.json()["detail"]["message"]
    r = client.post(f"/v1/sessions/{sid}/edits",
                    json={"op": "swap", "position": 0, "tag": "NOUN"})
    assert r.status_code == 422


def test_config_mismatch_409(client):
    good = client.get("/v1/health").json()["checkpoint_hash"]
    r = client.post("/v1/caption", json={"clip_id": "val_0000",
                                         "checkpoint_hash": "deadbeef"})
    assert r.status_code == 409
    assert r.json()["detail"]["checkpoint_hash"] == good
    r = client.post("/v1/caption", json={"clip_id": "val_0000",
                                         "checkpoint_hash": good})
    assert r.status_code == 200


def test_session_edit_history_monotone(client):
    sid = client.post("/v1/sessions",
                      json={"clip_id": "train_0000"}).json()["session_id"]
    hist_lens = []
    for i, tag in enumerate(("NUM", "ADJ")):
        doc = client.post(f"/v1/sessions/{sid}/edits",
                          json={"op": "set", "position": 0,
                                "tag": tag}).json()
        assert [h["index"] for h in doc["history"]] == list(range(i + 1))
        hist_lens.append(len(doc["history"]))
        assert doc["caption"]["edited"] is True
    assert hist_lens == [1, 2]
    assert doc["tags"][0] == "ADJ"


def test_edit_then_reset_byte_identical(client):
    create = client.post("/v1/sessions", json={"clip_id": "val_0000"})
    assert create.status_code == 201
    sid = create.json()["session_id"]
    client.post(f"/v1/sessions/{sid}/edits",
                json={"op": "insert", "position": 0, "tag": "NUM"})
    reset = client.post(f"/v1/sessions/{sid}/reset")
    assert reset.status_code == 200
    assert reset.content == create.content


def test_failed_edit_leaves_session_unchanged(client):
    sid = client.post("/v1/sessions",
                      json={"clip_id": "val_0000"}).json()["session_id"]
    before = client.post(f"/v1/sessions/{sid}/edits",
                         json={"op": "set", "position": 0, "tag": "NUM"}).json()
    client.post(f"/v1/sessions/{sid}/edits",
                json={"op": "set", "position": 999, "tag": "NOUN"})
    after = client.post(f"/v1/sessions/{sid}/edits",
                        json={"op": "set", "position": 0, "tag": "NUM"}).json()
    assert len(after["history"]) == len(before["history"]) + 1


def test_delete_session(client):
    sid = client.post("/v1/sessions",
                      json={"clip_id": "val_0000"}).json()["session_id"]
    assert client.delete(f"/v1/sessions/{sid}").status_code == 200
    r = client.post(f"/v1/sessions/{sid}/reset")
    assert r.status_code == 404
    assert client.delete(f"/v1/sessions/{sid}").status_code == 404


def test_session_ttl_expiry(setup):
    ckpt, data = setup
    now = [0.0]
    app = build_app(ckpt, data, session_ttl=10.0, clock=lambda: now[0])
    with TestClient(app) as c:
        sid = c.post("/v1/sessions",
                     json={"clip_id": "val_0000"}).json()["session_id"]
        now[0] = 5.0
        assert c.post(f"/v1/sessions/{sid}/reset").status_code == 200
        now[0] = 15.0    # touched at 5.0, so expires at 15.0
        assert c.post(f"/v1/sessions/{sid}/reset").status_code == 404


def test_bad_body_shape_422(client):
    r = client.post("/v1/caption", json={"beam_width": 2})
    assert r.status_code == 422
    r = client.post("/v1/caption", json={"clip_id": "val_0000",
                                         "beam_width": 0})
    assert r.status_code == 422


def test_restart_reproduces_responses(setup):
    ckpt, data = setup
    body = {"clip_id": "test_0001", "beam_width": 2,
            "overrides": [{"op": "set", "position": 0, "tag": "NUM"}]}
    with TestClient(build_app(ckpt, data)) as a:
        ra = a.post("/v1/caption", json=body)
    with TestClient(build_app(ckpt, data)) as b:
        rb = b.post("/v1/caption", json=body)
    assert ra.content == rb.content
