#!/usr/bin/env python3
"""Smoke test for the seqformer_py extension module.

Builds nothing itself: expects `cargo build -p seqformer-py --release`
to have produced target/release/libseqformer_py.so. The library is
copied next to this script under the importable module name.
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_module():
    candidates = [
        REPO / "target" / "release" / "libseqformer_py.so",
        REPO / "target" / "debug" / "libseqformer_py.so",
    ]
    source = next((p for p in candidates if p.exists()), None)
    if source is None:
        sys.exit(
            "libseqformer_py.so not found; run `cargo build -p seqformer-py --release` first"
        )
    staging = Path(tempfile.mkdtemp(prefix="seqformer_py_"))
    shutil.copy2(source, staging / "seqformer_py.so")
    sys.path.insert(0, str(staging))
    import seqformer_py

    return seqformer_py


def approx(a, b, tol=1e-12):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def check_tensor_ops(sq):
    a = sq.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = sq.Tensor([[1.0], [1.0]])
    prod = a.matmul(b)
    assert prod.tolist() == [[3.0], [7.0]]

    s = sq.Tensor([[0.0], [math.log(3.0)]]).column_softmax()
    approx(s.get(0, 0), 0.25)
    approx(s.get(1, 0), 0.75)

    means, variances = sq.Tensor([[1.0], [2.0], [3.0]]).column_mean_var()
    approx(means[0], 2.0)
    approx(variances[0], 2.0 / 3.0)

    try:
        sq.Tensor([[1.0, 2.0]]).matmul(sq.Tensor([[1.0, 2.0]]))
    except ValueError as e:
        assert "1x2" in str(e)
    else:
        raise AssertionError("shape mismatch not raised")
    print("ok   tensor ops")


def check_attention(sq):
    x = sq.Tensor([[1.0, -0.5, 0.25], [0.5, 1.5, -1.0]])
    zero = sq.Tensor.zeros(2, 2)
    uniform = sq.attention_weights(x, zero, zero)
    for key in range(3):
        for query in range(3):
            approx(uniform.get(key, query), 1.0 / 3.0)

    causal = sq.attention_weights(x, zero, zero, causal=True)
    assert causal.get(1, 0) == 0.0 and causal.get(2, 0) == 0.0
    approx(causal.get(0, 1), 0.5)

    y = sq.apply_attention(x, sq.Tensor.identity(3))
    assert y.tolist() == x.tolist()

    # a zero-projection head contributes nothing
    u = sq.Tensor([[0.3, -0.2], [0.1, 0.4]])
    v = sq.Tensor([[0.5, 0.1], [-0.3, 0.2]])
    dead_v = sq.Tensor.zeros(2, 2)
    one = sq.mhsa_forward(x, [(u, u, v)])
    two = sq.mhsa_forward(x, [(u, u, v), (u, u, dead_v)])
    for r in range(2):
        for c in range(3):
            approx(one.get(r, c), two.get(r, c))
    print("ok   attention")


def check_norm_and_positions(sq):
    x = sq.Tensor([[1.0], [2.0], [3.0]])
    normed = token_normed = sq.token_norm(x, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 1e-12)
    approx(token_normed.get(1, 0), 0.0, 1e-9)
    assert normed.get(2, 0) > 1.22

    pe = sq.sinusoidal_positions(8, 16)
    assert pe.rows == 8 and pe.cols == 16
    approx(pe.get(0, 0), 0.0)
    approx(pe.get(1, 0), 1.0)
    flat = [v for row in pe.tolist() for v in row]
    assert all(-1.0 <= v <= 1.0 for v in flat)
    print("ok   token norm + positions")


def check_model(sq):
    config = "\n".join(
        [
            "d_model = 16",
            "n_heads = 2",
            "n_layers = 1",
            "n_max = 48",
            "head = lm",
            "seq_len = 24",
            "steps = 150",
            "lr = 3e-3",
            "seed = 42",
        ]
    )
    corpus = "abcabc" * 60
    model = sq.Model.train_lm(config, corpus)
    losses = model.losses
    assert len(losses) == 150
    approx(losses[0], math.log(3.0), 1e-9)
    tail = sum(losses[-20:]) / 20.0
    assert tail < 0.4, f"tail loss {tail}"

    text = model.generate("ab", 30)
    assert text.startswith("ab") and len(text) == 32
    again = model.generate("ab", 30)
    assert text == again

    sampled = model.generate("ab", 30, temperature=0.5, seed=7)
    assert sampled == model.generate("ab", 30, temperature=0.5, seed=7)

    held_out = model.loss("abcabcabc")
    assert held_out < 1.0, f"held-out loss {held_out}"

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "model.sqfm")
        model.save(path)
        reloaded = sq.Model.load(path)
        assert reloaded.generate("ab", 30) == text
        assert reloaded.param_count == model.param_count
    print("ok   model train/generate/save/load")


def main():
    sq = import_module()
    check_tensor_ops(sq)
    check_attention(sq)
    check_norm_and_positions(sq)
    check_model(sq)
    print("smoke test passed")


if __name__ == "__main__":
    main()
