"""Numerics substrate: op semantics, finite-difference oracles, optimizer,
RNG streams, and the ACCW checkpoint container."""

import math

import numpy as np
import pytest
from util import fd_check, rel_err

import acc.numerics as N
from acc.errors import (CheckpointError, IndexTokenError, NonFiniteError,
                        ShapeError, UsageError)
from acc.numerics import Adam, SeedStreams, Tensor


def t64(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = N.matmul(t64(np.eye(2)), t64([[3.0, 4.0], [5.0, 6.0]]))
    assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_zero():
    out = N.matmul(t64([[1.0, 2.0]]), t64([[0.0], [0.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_grad_fd():
    rng = np.random.default_rng(0)
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (4, 2))
    fd_check(lambda x, y: N.sum_all(N.matmul(x, y)), [a, b], tol=1e-4)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"3, 4.*2, 2"):
        N.matmul(t64(np.zeros((3, 4))), t64(np.zeros((2, 2))))


# ---------------------------------------------------------------- softmax

def test_softmax_symmetry():
    out = N.softmax(t64([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]])


def test_softmax_stability_no_overflow():
    out = N.softmax(t64([[1000.0, 0.0]]))
    assert abs(out.data[0, 0] - 1.0) < 1e-6 and out.data[0, 1] < 1e-6


def test_softmax_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (1, 5))
    out = N.softmax(t64(x)).data
    naive = np.exp(x) / np.exp(x).sum()
    assert abs(out.sum() - 1.0) < 1e-6
    assert np.abs(out - naive).max() < 1e-6


def test_softmax_empty_axis_rejected():
    with pytest.raises(ShapeError):
        N.softmax(t64(np.zeros((2, 0))))


def test_softmax_rows_sum_to_one_property():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.uniform(-30, 30, (4, 7))
        s = N.softmax(t64(x)).data
        assert np.abs(s.sum(axis=1) - 1.0).max() < 1e-6
        assert (s >= 0).all()


# ---------------------------------------------------------------- cross_entropy

def test_cross_entropy_saturated_correct():
    logits = np.zeros((3, 4))
    targets = [1, 3, 0]
    for i, tgt in enumerate(targets):
        logits[i, tgt] = 1000.0
    assert N.cross_entropy(t64(logits), targets).item() < 1e-6


def test_cross_entropy_uniform_is_log_vocab():
    loss = N.cross_entropy(t64(np.zeros((2, 4))), [0, 3])
    assert abs(loss.item() - math.log(4)) < 1e-9


def test_cross_entropy_per_position_oracle():
    rng = np.random.default_rng(3)
    logits = rng.uniform(-2, 2, (3, 5))
    targets = [4, 0, 2]
    expect = 0.0
    for i, tgt in enumerate(targets):
        row = logits[i]
        expect += -(row[tgt] - math.log(np.exp(row).sum()))
    expect /= 3
    assert abs(N.cross_entropy(t64(logits), targets).item() - expect) < 1e-6


def test_cross_entropy_out_of_range_target():
    with pytest.raises(IndexTokenError):
        N.cross_entropy(t64(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_nonnegative_and_fd():
    rng = np.random.default_rng(4)
    logits = rng.uniform(-2, 2, (4, 6))
    targets = [5, 1, 0, 3]
    assert N.cross_entropy(t64(logits), targets).item() >= 0.0
    fd_check(lambda x: N.cross_entropy(x, targets), [logits], tol=1e-4)


# ---------------------------------------------------------------- kl_divergence

def test_kl_identical_is_zero():
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, (3, 4))
    assert N.kl_divergence(t64(x), t64(x)).item() == 0.0


def test_kl_two_token_hand_oracle():
    # p from logits [z, 0]; q uniform over V=2
    z = 1.7
    p = math.exp(z) / (math.exp(z) + 1.0)
    hand = p * math.log(p / 0.5) + (1 - p) * math.log((1 - p) / 0.5)
    got = N.kl_divergence(t64([[z, 0.0]]), t64([[0.0, 0.0]])).item()
    assert abs(got - hand) < 1e-6


def test_kl_grad_fd_and_teacher_detached():
    rng = np.random.default_rng(6)
    p_logits = rng.uniform(-2, 2, (3, 5))
    q_logits = rng.uniform(-2, 2, (3, 5))
    fd_check(lambda q: N.kl_divergence(Tensor(p_logits), q), [q_logits], tol=1e-4)
    p = Tensor(p_logits, requires_grad=True)
    q = Tensor(q_logits.copy(), requires_grad=True)
    N.kl_divergence(p, q).backward()
    assert p.grad is None and q.grad is not None


def test_kl_nonnegative_property():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = rng.uniform(-2, 2, (2, 3, 4))
        assert N.kl_divergence(t64(a), t64(b)).item() >= 0.0


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        N.kl_divergence(t64(np.zeros((2, 3))), t64(np.zeros((2, 4))))


# ---------------------------------------------------------------- backward

def test_backward_linear_case():
    x = t64([1.0, 2.0, 3.0], rg=True)
    N.sum_all(x).backward()
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic_case():
    x = t64([1.0, 2.0], rg=True)
    N.sum_all(N.mul(x, x)).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_without_reset():
    x = t64([1.0, 2.0], rg=True)
    N.sum_all(x).backward()
    N.sum_all(x).backward()
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_nonscalar():
    with pytest.raises(UsageError):
        t64([1.0, 2.0], rg=True).backward()


def test_backward_diamond_graph():
    # y = x used twice: grads add along both paths
    x = t64([1.5], rg=True)
    y = N.add(x, x)
    N.sum_all(N.mul(y, y)).backward()
    assert np.allclose(x.grad, [12.0])  # d/dx (2x)^2 = 8x


# ---------------------------------------------------------------- pointwise / structural op FD sweep

def test_every_differentiable_op_passes_fd():
    rng = np.random.default_rng(8)
    A = rng.uniform(-2, 2, (3, 4))
    B = rng.uniform(-2, 2, (3, 4))
    v = rng.uniform(-2, 2, (4,))
    C = rng.uniform(-2, 2, (4, 3))
    proj = rng.uniform(-1, 1, (3, 4))  # fixed projection breaks cancellation
    pm = lambda out: N.sum_all(N.mul(out, Tensor(proj)))

    fd_check(lambda a, b: pm(N.add(a, b)), [A.copy(), B.copy()])
    fd_check(lambda a, b: pm(N.sub(a, b)), [A.copy(), B.copy()])
    fd_check(lambda a, b: pm(N.mul(a, b)), [A.copy(), B.copy()])
    fd_check(lambda a: pm(N.neg(a)), [A.copy()])
    fd_check(lambda a: pm(N.scale(a, -1.37)), [A.copy()])
    fd_check(lambda a, b: pm(N.add_bias(a, b)), [A.copy(), v.copy()])
    proj33 = rng.uniform(-1, 1, (3, 3))
    fd_check(lambda a, c: N.sum_all(N.mul(N.transpose(N.matmul(a, c)), Tensor(proj33))),
             [A.copy(), C.copy()])
    fd_check(lambda a: pm(N.slice_rows(N.concat_rows([a, a]), 1, 4)), [A.copy()])
    fd_check(lambda a: N.sum_all(N.slice_cols(N.concat_cols([a, a]), 2, 7)), [A.copy()])
    fd_check(lambda a: N.mean_all(a), [A.copy()])
    fd_check(lambda a: N.sum_all(N.mul(N.mean_rows(a), Tensor(proj[:1]))), [A.copy()])
    fd_check(lambda a: pm(N.softmax(a, axis=1)), [A.copy()])
    fd_check(lambda a: pm(N.softmax(a, axis=0)), [A.copy()])
    fd_check(lambda a: pm(N.gelu(a)), [A.copy()])
    fd_check(lambda a: pm(N.sigmoid(a)), [A.copy()])
    fd_check(lambda a: pm(N.logsigmoid(a)), [A.copy()])
    fd_check(lambda a, g: pm(N.rmsnorm(a, g)), [A.copy(), v.copy()])
    tbl = rng.uniform(-2, 2, (6, 4))
    ids = [0, 5, 5, 2]
    proj44 = rng.uniform(-1, 1, (4, 4))
    fd_check(lambda T_: N.sum_all(N.mul(N.embedding(T_, ids), Tensor(proj44))), [tbl])
    y = np.array([[1.0], [0.0], [1.0]])
    z = rng.uniform(-2, 2, (3, 1))
    fd_check(lambda q: N.bce_with_logits(q, y), [z])


def test_bce_hand_value():
    z = np.array([[0.0]])
    got = N.bce_with_logits(t64(z), np.array([[1.0]])).item()
    assert abs(got - math.log(2)) < 1e-9


def test_nonfinite_is_reported_not_propagated():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))
    big = t64([1e308])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        N.scale(big, 1e10)


# ---------------------------------------------------------------- optimizer

def test_optimizer_quadratic_convergence():
    x = t64([0.0], rg=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        d = N.sub(x, t64([3.0]))
        N.sum_all(N.mul(d, d)).backward()
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-2


def test_optimizer_zero_grad_keeps_params():
    x = t64([1.0, -2.0], rg=True)
    opt = Adam({"x": x}, lr=0.5)
    x.grad = np.zeros_like(x.data)
    before = x.data.copy()
    opt.step()
    assert np.array_equal(x.data, before) and opt.step_count == 1


def test_optimizer_missing_grad_is_usage_error():
    x = t64([1.0], rg=True)
    opt = Adam({"x": x}, lr=0.1)
    with pytest.raises(UsageError):
        opt.step()


def test_optimizer_determinism_bitwise():
    def run():
        rng = SeedStreams(11).stream("init")
        x = Tensor(rng.normal(size=4).astype(np.float64), requires_grad=True)
        opt = Adam({"x": x}, lr=0.05)
        for _ in range(50):
            opt.zero_grad()
            N.sum_all(N.mul(x, x)).backward()
            opt.step()
        return x.data.copy()

    assert np.array_equal(run(), run())


def test_optimizer_state_roundtrip(tmp_path):
    x = t64([1.0, 2.0], rg=True)
    opt = Adam({"x": x}, lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        N.sum_all(N.mul(x, x)).backward()
        opt.step()
    path = tmp_path / "opt.ackpt"
    N.write_checkpoint(path, opt.state_entries())
    loaded = N.read_checkpoint(path)
    opt2 = Adam({"x": Tensor(x.data.copy(), requires_grad=True)}, lr=0.1)
    opt2.load_state_entries(loaded)
    assert opt2.step_count == 3
    assert np.array_equal(opt2.m["x"], opt.m["x"])
    assert np.array_equal(opt2.v["x"], opt.v["x"])


# ---------------------------------------------------------------- rng streams

def test_rng_same_seed_same_stream_bitwise():
    a = SeedStreams(7).stream("init").normal(size=16)
    b = SeedStreams(7).stream("init").normal(size=16)
    assert np.array_equal(a, b)


def test_rng_purposes_do_not_perturb_each_other():
    s = SeedStreams(7)
    before = s.stream("data-order").integers(0, 1000, size=8)
    _ = s.stream("trajectory").integers(0, 1000, size=999)
    after = s.stream("data-order").integers(0, 1000, size=8)
    assert np.array_equal(before, after)
    assert not np.array_equal(before, s.stream("trajectory").integers(0, 1000, size=8))


def test_rng_child_derivation_is_stable():
    assert np.array_equal(
        SeedStreams(3).child("epoch-0").stream("shuffle").integers(0, 99, 5),
        SeedStreams(3).child("epoch-0").stream("shuffle").integers(0, 99, 5))


# ---------------------------------------------------------------- checkpoint container

def test_checkpoint_roundtrip(tmp_path):
    entries = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b.scalar": np.asarray(7.5, dtype=np.float64),
        "c": np.linspace(-1, 1, 5).astype(np.float64),
    }
    path = tmp_path / "w.ackpt"
    N.write_checkpoint(path, entries)
    out = N.read_checkpoint(path)
    assert list(out) == ["a", "b.scalar", "c"]
    for k in entries:
        assert out[k].dtype == entries[k].dtype
        assert np.array_equal(out[k], entries[k])


def test_checkpoint_exact_bytes(tmp_path):
    # independent layout oracle: one f32 entry "w" of shape (1,1) value 1.0
    path = tmp_path / "w.ackpt"
    N.write_checkpoint(path, {"w": np.ones((1, 1), dtype=np.float32)})
    expect = (b"ACCW"
              + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
              + (1).to_bytes(4, "little") + b"w"
              + (0).to_bytes(1, "little") + (2).to_bytes(4, "little")
              + (1).to_bytes(8, "little") + (1).to_bytes(8, "little")
              + bytes.fromhex("0000803f"))
    assert path.read_bytes() == expect


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "w.ackpt"
    N.write_checkpoint(path, {"w": np.zeros(1, dtype=np.float32)})
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        N.read_checkpoint(path)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "w.ackpt"
    N.write_checkpoint(path, {"w": np.zeros(3, dtype=np.float64)})
    raw = path.read_bytes()
    bad = tmp_path / "bad.ackpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        N.read_checkpoint(bad)
    cut = tmp_path / "cut.ackpt"
    cut.write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        N.read_checkpoint(cut)
