import numpy as np
import pytest

from dysi.model import DECODER_ONLY, ENCODER_DECODER, ModelConfig, Transformer


def numeric_grad(f, x: np.ndarray, h: float = 1e-3, idx=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place and restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    positions = np.ndindex(*x.shape) if idx is None else idx
    for i in positions:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def tiny_config(mode=ENCODER_DECODER, **kw) -> ModelConfig:
    base = dict(vocab_size=11, d_model=16, n_heads=2, n_layers=2, ffn_dim=32, dropout=0.0,
                max_positions=16, mode=mode)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def encdec():
    return Transformer.create(tiny_config(ENCODER_DECODER), seed=3)


@pytest.fixture
def declm():
    return Transformer.create(tiny_config(DECODER_ONLY), seed=4)


# --- acceptance reporting -----------------------------------------------------

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """``record(num, ok, detail)`` logs one verdict line per acceptance criterion."""
    def record(num: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[num] = (bool(ok), detail)
        print(f"criterion {num}: {'PASS' if ok else 'FAIL'} | {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'} | {detail}")
