"""Acceptance gates P1-P9. Run with `pytest tests/test_acceptance.py -v -s`.

Each criterion is one test that prints a PASS line with its measured
numbers when it holds; a failed assert is the FAIL signal.
"""

import math
import time

import numpy as np

from capskit.accel import CostTable, PEArraySpec, ROUTING_STEPS, routing_cycle_report
from capskit.capsnet import (
    CapsNetSpec,
    agreement_parallel,
    agreement_reference,
    route_optimized,
    route_reference,
)
from capskit.errors import InputError
from capskit.fxp import FxFormat, FxTensor, div_approx, exp_approx, exp_reduced_interval, softmax_approx
from capskit.io import (
    MaskEntry,
    load_idx,
    load_mask,
    load_weights,
    save_idx_images,
    save_mask,
    save_weights,
)
from capskit.pruning import (
    LayerStack,
    NetTopology,
    compression_report,
    kernel_score_table,
    lakp_prune,
    lookahead_scores,
    propagate_dead_structures,
)


def ok(criterion: str, detail: str):
    print(f"\n{criterion}: PASS ({detail})")


# ---------------------------------------------------------------------------
# P1: look-ahead score and selection oracle equivalence


def brute_scores_and_sets(layers, sparsities):
    """Fully independent score + selection oracle, plain Python loops."""

    def frob_rows(w):  # norm of the slice producing each out channel
        out = []
        for o in range(w.shape[0]):
            acc = 0.0
            for c in range(w.shape[1]):
                for y in range(w.shape[2]):
                    for x in range(w.shape[3]):
                        acc += w[o, c, y, x] ** 2
            out.append(math.sqrt(acc))
        return out

    def frob_cols(w):  # norm of the slice consuming each in channel
        out = []
        for c in range(w.shape[1]):
            acc = 0.0
            for o in range(w.shape[0]):
                for y in range(w.shape[2]):
                    for x in range(w.shape[3]):
                        acc += w[o, c, y, x] ** 2
            out.append(math.sqrt(acc))
        return out

    tables, pruned_sets = [], []
    for i, w in enumerate(layers):
        f_in = frob_rows(layers[i - 1]) if i > 0 else None
        f_out = frob_cols(layers[i + 1]) if i < len(layers) - 1 else None
        table = np.zeros(w.shape[:2])
        for o in range(w.shape[0]):
            for c in range(w.shape[1]):
                acc = 0.0
                for y in range(w.shape[2]):
                    for x in range(w.shape[3]):
                        score = abs(w[o, c, y, x])
                        if f_in is not None:
                            score *= f_in[c]
                        if f_out is not None:
                            score *= f_out[o]
                        acc += score
                table[o, c] = acc
        tables.append(table)
        ranked = sorted((s, kid) for kid, s in enumerate(table.ravel()))
        n = int(math.floor(sparsities[i] * table.size))
        pruned_sets.append({kid for _, kid in ranked[:n]})
    return tables, pruned_sets


def test_p1_lakp_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.monotonic()
    worst = 0.0
    for trial in range(100):
        dims = [rng.integers(2, 15) for _ in range(4)]
        k = int(rng.choice([1, 3]))
        layers = [
            rng.normal(size=(dims[1], dims[0], k, k)),
            rng.normal(size=(dims[2], dims[1], k, k)),
            rng.normal(size=(dims[3], dims[2], k, k)),
        ]
        assert all(w.shape[0] * w.shape[1] <= 200 for w in layers)
        sparsities = [float(rng.uniform(0, 0.9)) for _ in range(3)]
        want_tables, want_sets = brute_scores_and_sets(layers, sparsities)
        masks, _ = lakp_prune(LayerStack(layers, sparsities))
        for i, w in enumerate(layers):
            w_prev = layers[i - 1] if i > 0 else None
            w_next = layers[i + 1] if i < 2 else None
            got_table = kernel_score_table(lookahead_scores(w_prev, w, w_next))
            worst = max(worst, float(np.abs(got_table - want_tables[i]).max()))
            got_set = set(np.flatnonzero(~masks[i].mask.ravel()))
            assert got_set == want_sets[i], f"trial {trial} layer {i}"
    elapsed = time.monotonic() - start
    assert worst <= 1e-9
    assert elapsed < 30.0
    ok("P1", f"100 stacks, max score error {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# P2: positive-scaling invariance


def test_p2_scaling_invariance():
    rng = np.random.default_rng(102)
    for trial in range(100):
        layers = [
            rng.uniform(-1, 1, (6, 3, 3, 3)),
            rng.uniform(-1, 1, (8, 6, 3, 3)),
            rng.uniform(-1, 1, (5, 8, 3, 3)),
        ]
        sparsities = [float(rng.uniform(0.1, 0.8)) for _ in range(3)]
        base, _ = lakp_prune(LayerStack(layers, sparsities))
        layer_idx = int(rng.integers(0, 3))
        for c in (0.01, 1.0, 100.0):
            scaled = [w.copy() for w in layers]
            scaled[layer_idx] = scaled[layer_idx] * c
            masks, _ = lakp_prune(LayerStack(scaled, sparsities))
            for a, b in zip(base, masks):
                assert np.array_equal(a.mask, b.mask), f"trial {trial} c={c}"
    ok("P2", "100 trials x {0.01, 1, 100}, selections identical")


# ---------------------------------------------------------------------------
# P3: structural reproduction


def test_p3_structural_counts():
    topo = NetTopology()
    for groups_alive, want_caps, want_routing in ((7, 252, 322_560), (12, 432, 552_960)):
        conv1 = PruneMask_like(np.ones((256, 1), dtype=bool))
        grid = np.zeros((256, 256), dtype=bool)
        grid[: groups_alive * 8] = True
        masks = [conv1, PruneMask_like(grid, "capsule_group")]
        result = propagate_dead_structures(masks, topo)
        assert len(result.surviving_capsules) == want_caps
        assert result.spec.routing_weight_count == want_routing
    assert CapsNetSpec().routing_weight_count == 1_474_560
    ok("P3", "252/322560 and 432/552960 vs unpruned 1474560, exact")


def PruneMask_like(mask, granularity="kernel"):
    from capskit.pruning import PruneMask

    return PruneMask(mask, granularity)


# ---------------------------------------------------------------------------
# P4: approximation error


def test_p4_approximation_errors():
    lo, hi = exp_reduced_interval()
    r = np.linspace(lo, hi, 10_000)
    exp_reduced = float((np.abs(exp_approx(r) - np.exp(r)) / np.exp(r)).max())
    assert exp_reduced <= 1e-3

    x = np.linspace(-20, 5, 10_000)
    exp_wide = float((np.abs(exp_approx(x) - np.exp(x)) / np.exp(x)).max())
    assert exp_wide <= 5e-3

    rng = np.random.default_rng(104)
    a = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), 10_000))
    b = np.exp(rng.uniform(np.log(1e-3), np.log(1e3), 10_000))
    div_err = float((np.abs(div_approx(a, b) * b - a) / a).max())
    assert div_err <= 1e-2

    worst_sum = 0.0
    checked = 0
    for _ in range(1000):
        v = rng.uniform(-5, 5, 10)
        out = softmax_approx(v)
        worst_sum = max(worst_sum, abs(float(out.sum()) - 1.0))
        exact = np.exp(v - v.max())
        exact /= exact.sum()
        top = np.sort(exact)
        if top[-1] - top[-2] >= 0.01:
            checked += 1
            assert np.argmax(out) == np.argmax(exact)
    assert worst_sum <= 1e-3
    ok(
        "P4",
        f"exp {exp_reduced:.1e}/{exp_wide:.1e}, div {div_err:.1e}, "
        f"softmax sum {worst_sum:.1e}, argmax {checked}/{checked}",
    )


# ---------------------------------------------------------------------------
# P5: loop-reorder equivalence


def divisors(n):
    return [d for d in range(1, n + 1) if n % d == 0]


def test_p5_loop_reorder_bitwise():
    rng = np.random.default_rng(105)
    fmt = FxFormat(8)
    total = 0
    for in_ch in (8, 36, 1152):
        for _ in range(50):
            u = FxTensor(rng.integers(-2000, 2000, (in_ch, 10, 16), dtype=np.int16), fmt)
            v = FxTensor(rng.integers(-2000, 2000, (10, 16), dtype=np.int16), fmt)
            want = agreement_reference(u, v)
            for fact in divisors(in_ch):
                got = agreement_parallel(u, v, fact)
                assert np.array_equal(got, want), f"IN={in_ch} fact={fact}"
                total += 1
    ok("P5", f"{total} (instance, fact) pairs bit-identical")


# ---------------------------------------------------------------------------
# P6: routing correctness


def straight_line_route(u_hat, iters):
    n_in, n_out, dim = u_hat.shape
    b = np.zeros((n_in, n_out))
    c = v = None
    for it in range(iters):
        c = np.zeros((n_in, n_out))
        for i in range(n_in):
            exps = [math.exp(b[i][j]) for j in range(n_out)]
            tot = sum(exps)
            for j in range(n_out):
                c[i][j] = exps[j] / tot
        s = np.zeros((n_out, dim))
        for j in range(n_out):
            for k in range(dim):
                for i in range(n_in):
                    s[j][k] += c[i][j] * u_hat[i][j][k]
        v = np.zeros((n_out, dim))
        for j in range(n_out):
            n2 = sum(s[j][k] ** 2 for k in range(dim))
            factor = math.sqrt(n2) / (1.0 + n2)
            for k in range(dim):
                v[j][k] = s[j][k] * factor
        if it < iters - 1:
            for i in range(n_in):
                for j in range(n_out):
                    for k in range(dim):
                        b[i][j] += u_hat[i][j][k] * v[j][k]
    return b, c, v


def test_p6_routing_correctness():
    rng = np.random.default_rng(106)
    worst_oracle = 0.0
    for _ in range(100):
        u = rng.normal(size=(8, 3, 4))
        state = route_reference(u, iters=3)
        b, c, v = straight_line_route(u, 3)
        worst_oracle = max(
            worst_oracle,
            float(np.abs(state.v - v).max()),
            float(np.abs(state.c - c).max()),
            float(np.abs(state.b - b).max()),
        )
    assert worst_oracle <= 1e-10

    worst_row = 0.0
    worst_v = 0.0
    agree = 0
    considered = 0
    for _ in range(1000):
        u = rng.normal(size=(8, 3, 4))
        ref = route_reference(u, 3)
        opt = route_optimized(u, 3, fact=4)
        for state in (ref, opt):
            worst_row = max(worst_row, float(np.abs(state.c.sum(axis=1) - 1.0).max()))
        worst_v = max(worst_v, float(np.abs(ref.v - opt.v).max()))
        norms_ref = np.linalg.norm(ref.v, axis=1)
        norms_opt = np.linalg.norm(opt.v, axis=1)
        top = np.sort(norms_ref)
        if top[-1] - top[-2] >= 0.05:
            considered += 1
            agree += int(np.argmax(norms_ref) == np.argmax(norms_opt))
    assert worst_row <= 1e-3
    assert worst_v <= 0.02
    assert considered > 0 and agree / considered >= 0.99
    ok(
        "P6",
        f"oracle {worst_oracle:.1e}, rows {worst_row:.1e}, v {worst_v:.1e}, "
        f"class {agree}/{considered}",
    )


# ---------------------------------------------------------------------------
# P7: cycle-model gates


def test_p7_cycle_model_gates():
    report = routing_cycle_report(CapsNetSpec(capsule_types=7), CostTable(), PEArraySpec())
    table = report.format_table()
    assert "exp: 27 -> 14" in table
    assert "div: 49 -> 36" in table
    reduction = report.softmax_reduction_pct
    assert 75.0 <= reduction <= 95.0
    for name in ROUTING_STEPS:
        s = report.steps[name]
        assert s.optimized < s.baseline, name
    ok("P7", f"exp 27->14, div 49->36, softmax -{reduction:.1f}%, all steps improve")


# ---------------------------------------------------------------------------
# P8: format robustness


def test_p8_format_robustness(tmp_path):
    rng = np.random.default_rng(108)
    w_path = tmp_path / "w.fc"
    save_weights(
        w_path,
        {
            "conv1.weight": rng.normal(size=(8, 1, 3, 3)).astype(np.float32),
            "fx": FxTensor(rng.integers(-500, 500, (4, 6), dtype=np.int16), FxFormat(9)),
        },
    )
    m_path = tmp_path / "m.fm"
    save_mask(
        m_path,
        [
            MaskEntry("conv1", "kernel", rng.random(64) > 0.4),
            MaskEntry("capsules", "capsule_group", rng.random(1152) > 0.7),
        ],
    )
    i_path = tmp_path / "d.idx"
    save_idx_images(i_path, rng.random((4, 8, 8)))

    # bitwise round trips
    save_weights(tmp_path / "w2.fc", load_weights(w_path))
    assert (tmp_path / "w2.fc").read_bytes() == w_path.read_bytes()
    save_mask(tmp_path / "m2.fm", load_mask(m_path))
    assert (tmp_path / "m2.fm").read_bytes() == m_path.read_bytes()
    imgs = load_idx(i_path)
    save_idx_images(tmp_path / "d2.idx", imgs)
    assert (tmp_path / "d2.idx").read_bytes() == i_path.read_bytes()

    cases = [(w_path, load_weights), (m_path, load_mask), (i_path, load_idx)]
    scratch = tmp_path / "fuzz.bin"
    fuzzed = 0
    errors = 0
    for path, loader in cases:
        original = path.read_bytes()
        for trial in range(3334):
            data = bytearray(original)
            action = trial % 3
            if action == 0:
                data = data[: rng.integers(0, len(data))]
            elif action == 1:
                data[rng.integers(0, len(data))] ^= int(rng.integers(1, 256))
            else:
                cut = rng.integers(0, len(data))
                data = data[:cut] + bytes(rng.integers(0, 256, 4, dtype=np.uint8))
            scratch.write_bytes(bytes(data))
            fuzzed += 1
            try:
                loader(scratch)
            except InputError:
                errors += 1  # structured error; silence is also fine if parseable
    assert fuzzed >= 10_000
    ok("P8", f"3 formats round-trip bitwise; {fuzzed} fuzz cases, {errors} structured errors, 0 crashes")


# ---------------------------------------------------------------------------
# P9: index overhead


def test_p9_index_overhead():
    rng = np.random.default_rng(109)
    stack = LayerStack(
        [rng.normal(size=(256, 1, 9, 9)), rng.normal(size=(256, 256, 9, 9))],
        [0.875, 25 / 32],
        ["kernel", "capsule_group"],
    )
    masks, _ = lakp_prune(stack)
    topo = NetTopology()
    result = propagate_dead_structures(masks, topo)
    report = compression_report(result, stack, topo)
    assert report["survived_capsules"] == 252
    assert report["index_overhead_pct"] <= 0.5
    ok(
        "P9",
        f"252-capsule config: {report['index_entries']} index entries over "
        f"{report['surviving_weight_count']} weights = {report['index_overhead_pct']:.3f}%",
    )
