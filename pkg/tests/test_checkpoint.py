import numpy as np
import pytest

from dysi import checkpoint as C
from dysi.errors import CheckpointError
from dysi.optim import OptimizerState


def make(value=None, seed=0, step=7, with_opt=True, vocab="v1"):
    rng = np.random.default_rng(seed)
    params = {"b.w": rng.normal(size=(3, 4)).astype(np.float32),
              "a.b": rng.normal(size=(4,)).astype(np.float32),
              "s": np.float32(rng.normal()).reshape(())}
    if value is not None:
        params = {k: np.full_like(v, value) for k, v in params.items()}
    opt = None
    if with_opt:
        opt = OptimizerState.for_params(params)
        for k in params:
            opt.m[k] += 0.5
            opt.v[k] += 0.25
        opt.step = 5
    return C.Checkpoint(params, opt, step, {"vocab_digest": vocab, "note": "ünïcode"})


def test_roundtrip_bytes_identical(tmp_path):
    ck = make()
    C.save(tmp_path / "a.dysi", ck)
    loaded = C.load(tmp_path / "a.dysi")
    C.save(tmp_path / "b.dysi", loaded)
    assert (tmp_path / "a.dysi").read_bytes() == (tmp_path / "b.dysi").read_bytes()
    assert all(np.array_equal(ck.params[k], loaded.params[k]) for k in ck.params)
    assert loaded.optimizer.step == 5 and loaded.optimizer.beta2 == 0.98
    assert np.array_equal(loaded.optimizer.v["a.b"], ck.optimizer.v["a.b"])
    assert loaded.step == 7 and loaded.meta == ck.meta


def test_roundtrip_without_optimizer():
    ck = make(with_opt=False)
    back = C.from_bytes(C.to_bytes(ck))
    assert back.optimizer is None and C.to_bytes(back) == C.to_bytes(ck)


def test_version_mismatch_refused():
    blob = bytearray(C.to_bytes(make()))
    blob[4] = C.VERSION + 1
    with pytest.raises(CheckpointError, match="version"):
        C.from_bytes(bytes(blob))


def test_corruption_detected():
    blob = C.to_bytes(make())
    with pytest.raises(CheckpointError):
        C.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        C.from_bytes(blob[:-3])
    with pytest.raises(CheckpointError):
        C.from_bytes(blob + b"\0")
    with pytest.raises(CheckpointError):
        C.load("/nonexistent/x.dysi")


def test_save_leaves_no_temp_file(tmp_path):
    C.save(tmp_path / "x.dysi", make())
    assert [p.name for p in tmp_path.iterdir()] == ["x.dysi"]


def test_average_one_is_identity(tmp_path):
    ck = make()
    C.save(tmp_path / "a.dysi", ck)
    avg = C.average_checkpoints([tmp_path / "a.dysi"])
    assert all(np.array_equal(avg.params[k], ck.params[k]) for k in ck.params)
    assert avg.optimizer is None


def test_average_identical_is_identity(tmp_path):
    ck = make(seed=3)
    paths = [C.save(tmp_path / f"{i}.dysi", ck) for i in range(4)]
    avg = C.average_checkpoints(paths)
    assert all(np.array_equal(avg.params[k], ck.params[k]) for k in ck.params)


def test_average_zero_and_two(tmp_path):
    a = C.save(tmp_path / "a.dysi", make(0.0, step=10))
    b = C.save(tmp_path / "b.dysi", make(2.0, step=20))
    avg = C.average_checkpoints([a, b])
    assert all((v == 1.0).all() for v in avg.params.values())
    assert avg.step == 20 and len(avg.meta["averaged_from"]) == 2


def test_average_refuses_mismatch(tmp_path):
    a = C.save(tmp_path / "a.dysi", make())
    other = make()
    other.params["extra"] = np.zeros(2, np.float32)
    b = C.save(tmp_path / "b.dysi", other)
    with pytest.raises(CheckpointError):
        C.average_checkpoints([a, b])
    c = C.save(tmp_path / "c.dysi", make(vocab="v2"))
    with pytest.raises(CheckpointError, match="vocabulary"):
        C.average_checkpoints([a, c])
    shaped = make()
    shaped.params["a.b"] = np.zeros(5, np.float32)
    d = C.save(tmp_path / "d.dysi", shaped)
    with pytest.raises(CheckpointError, match="shape"):
        C.average_checkpoints([a, d])
    with pytest.raises(CheckpointError):
        C.average_checkpoints([])


def test_digest_is_canonical():
    assert C.digest({"a": 1, "b": [1, 2]}) == C.digest({"b": [1, 2], "a": 1})
    assert C.digest({"a": 1}) != C.digest({"a": 2})
