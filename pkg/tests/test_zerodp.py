import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adam64, from_half_bits, mlp_grad64
from zerosim.model import ModelSpec, param_count, synthetic_batch
from zerosim.mpadam import AdamHyper
from zerosim.planner import STAGES, Stage, model_state_bytes
from zerosim.transport import ProtocolError
from zerosim.zerodp import (
    Fault,
    RunConfig,
    build_sim_ranks,
    chunk_schedule,
    compare_to_baseline,
    initial_master,
    make_layout,
    measured_state_bytes,
    planner_agrees,
    residency_bound,
    run_equivalence_suite,
    run_sim,
    train_step,
)

SMALL = ModelSpec(2, 8, 1, 1)  # 2-8-1, 33 parameters
SPEC_1199 = ModelSpec(10, 21, 2, 3)  # pads to 1200 on 4 ranks


def test_layout_examples():
    lay = make_layout(10, 4)
    assert lay.padded == 12 and lay.ranges == ((0, 3), (3, 6), (6, 9), (9, 12))
    assert make_layout(8, 1).ranges == ((0, 8),)
    assert make_layout(7, 2).padded == 8
    assert lay.owner_of(7) == 2
    with pytest.raises(ValueError):
        make_layout(0, 2)


@given(st.integers(1, 5000), st.integers(1, 16))
def test_layout_tiles_padded_range(psi, n):
    lay = make_layout(psi, n)
    assert lay.padded % n == 0 and 0 <= lay.padded - psi < n
    assert lay.ranges[0][0] == 0 and lay.ranges[-1][1] == lay.padded
    assert all(a[1] == b[0] for a, b in zip(lay.ranges, lay.ranges[1:]))


def test_padding_stays_zero():
    spec = ModelSpec(2, 2, 1)  # 9 params -> padded 10 on 2 ranks
    for stage in STAGES:
        runs = run_sim(stage, RunConfig(stage, 2, spec, steps=5, seed=3, batch_size=4))
        assert runs[0].final_master[9] == 0.0
        for r in runs:
            for rep in r.reports:
                assert rep.loss >= 0


@pytest.mark.parametrize(
    "stage, expected",
    [(Stage.BASELINE, 19200), (Stage.POS, 4 * 1200 + 12 * 300), (Stage.POSG, 6600), (Stage.POSGP, 4800)],
)
def test_measured_state_bytes_examples(stage, expected):
    ranks = build_sim_ranks(stage, SPEC_1199, 4, seed=1)
    assert ranks[0].layout.padded == 1200
    for st_ in ranks:
        assert measured_state_bytes(st_, stage).model_states == expected
        assert planner_agrees(st_, stage)


def test_memory_law_holds_after_steps():
    for stage in STAGES:
        for n in (1, 2, 4):
            runs = run_sim(stage, RunConfig(stage, n, SMALL, steps=2, seed=1, batch_size=4))
            padded = make_layout(param_count(SMALL), n).padded
            planned = model_state_bytes(padded, 12, n, stage)
            for r in runs:
                assert r.reports[-1].state_bytes.model_states == planned.model_states


def test_single_rank_all_stages_equal():
    finals = [run_sim(s, RunConfig(s, 1, SMALL, steps=10, seed=2, batch_size=4))[0].final_master for s in STAGES]
    assert all(f.tobytes() == finals[0].tobytes() for f in finals)


def test_single_rank_matches_fp64_adam_reference():
    # one step of plain mixed-precision Adam: fp16 weights, fp32 master
    cfg = RunConfig(Stage.BASELINE, 1, SMALL, steps=1, seed=5, batch_size=4)
    final = run_sim(Stage.BASELINE, cfg)[0].final_master
    psi = param_count(SMALL)
    master = initial_master(psi, psi, 5)
    batch = synthetic_batch(SMALL, 4, 5, 0)
    w16 = from_half_bits(np.asarray(master).astype(np.float16).view(np.uint16)).astype(np.float64)
    g = mlp_grad64(SMALL.shapes, w16, batch.inputs, batch.targets)
    ref = adam64(master.astype(np.float64), [g])
    np.testing.assert_allclose(final[:psi], ref, atol=1e-5)


def test_equivalence_small_suite():
    v = run_equivalence_suite(SMALL, (1, 2, 4), steps=10, seed=(1, 7))
    assert v.ok, [d.describe() for d in v.divergences]
    assert len(v.checked) == 2 * 3 * 3


def test_equivalence_with_tiny_buckets():
    v = run_equivalence_suite(SMALL, (3,), steps=5, seed=4, batch_size=6, bucket_capacity=2)
    assert v.ok


def test_steps_zero_trivially_equal():
    assert run_equivalence_suite(SMALL, (2,), steps=0).ok


def test_fault_is_located():
    fault = Fault(Stage.POSG, 4, step=3, index=17)
    v = run_equivalence_suite(SMALL, (4,), steps=6, seed=7, fault=fault)
    assert len(v.divergences) == 1
    d = v.divergences[0]
    assert (d.stage, d.step, d.index, d.n_ranks) == (Stage.POSG, 3, 17, 4)
    assert "step 3, index 17" in d.describe()


def test_compare_detects_initial_mismatch():
    cfg = RunConfig(Stage.BASELINE, 2, SMALL, steps=1, seed=1, batch_size=4)
    base = run_sim(Stage.BASELINE, cfg, record=True)
    other = run_sim(Stage.POS, RunConfig(Stage.POS, 2, SMALL, steps=1, seed=2, batch_size=4), record=True)
    d = compare_to_baseline(Stage.POS, base, other, 2, 1)
    assert d is not None and d.step == -1


@pytest.mark.parametrize("n", [2, 4, 8])
def test_volume_law_per_step(n):
    psi = param_count(SMALL)
    padded = make_layout(psi, n).padded
    for stage in STAGES:
        runs = run_sim(stage, RunConfig(stage, n, SMALL, steps=2, seed=1, batch_size=8))
        want = (3 if stage is Stage.POSGP else 2) * padded * (n - 1) // n
        assert all(rep.elements_sent == want for r in runs for rep in r.reports)


def test_posgp_holds_only_its_partition():
    runs = build_sim_ranks(Stage.POSGP, SPEC_1199, 4, seed=1)
    assert all(r.params_f16.shape == (300,) and r.grads_f16.shape == (300,) for r in runs)
    assert all(len(r.opt) == 300 for r in runs)


@pytest.mark.parametrize("spec, n", [(SMALL, 4), (ModelSpec(4, 8, 2, 3), 8), (SPEC_1199, 4), (ModelSpec(2, 2, 1), 3)])
def test_posgp_residency_within_bound(spec, n):
    bs = 2 * n
    runs = run_sim(Stage.POSGP, RunConfig(Stage.POSGP, n, spec, steps=2, seed=1, batch_size=bs))
    lay = make_layout(param_count(spec), n)
    for r in runs:
        bound = residency_bound(lay, spec, r.rank)
        assert all(rep.peak_cached_chunks <= bound for rep in r.reports)
        assert bound <= n - 1


def test_chunk_schedule_covers_every_chunk():
    lay = make_layout(param_count(SMALL), 8)
    sched = chunk_schedule(lay, SMALL)
    assert sorted({c for cs in sched for c in cs}) == list(range(8))


def test_train_step_api():
    ranks = build_sim_ranks(Stage.POS, SMALL, 2, seed=1)
    reports = train_step(Stage.POS, ranks, synthetic_batch(SMALL, 4, 1, 0), AdamHyper())
    assert [r.rank for r in reports] == [0, 1]
    assert reports[0].elements_sent == 2 * make_layout(param_count(SMALL), 2).padded // 2
    with pytest.raises(ValueError):
        train_step(Stage.POS, ranks, synthetic_batch(SMALL, 3, 1, 0), AdamHyper())


def test_run_config_validation():
    with pytest.raises(ValueError):
        run_sim(Stage.POS, RunConfig(Stage.POS, 3, SMALL, batch_size=4))
    with pytest.raises(ValueError):
        run_sim(Stage.POS, RunConfig(Stage.POS, 2, SMALL, steps=-1, batch_size=4))


def test_global_losses_gathered():
    runs = run_sim(Stage.POSG, RunConfig(Stage.POSG, 2, SMALL, steps=3, seed=1, batch_size=4), gather_losses=True)
    assert runs[0].global_losses() == runs[1].global_losses()
    assert len(runs[0].global_losses()) == 3


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([1, 2, 3, 4]), st.integers(0, 10_000), st.sampled_from(STAGES[1:]))
def test_equivalence_property(n, seed, stage):
    base = run_sim(Stage.BASELINE, RunConfig(Stage.BASELINE, n, SMALL, steps=3, seed=seed, batch_size=12), record=True)
    other = run_sim(stage, RunConfig(stage, n, SMALL, steps=3, seed=seed, batch_size=12), record=True)
    assert compare_to_baseline(stage, base, other, n, seed) is None


def test_tcp_matches_sim():
    from zerosim.zerodp import run_tcp

    cfg = RunConfig(Stage.POSGP, 2, SMALL, steps=3, seed=1, batch_size=4)
    tcp = run_tcp([Stage.POSGP, Stage.BASELINE], cfg, timeout=30)
    sim = run_sim(Stage.POSGP, cfg)
    assert tcp[Stage.POSGP][0].final_master.tobytes() == sim[0].final_master.tobytes()
    assert tcp[Stage.BASELINE][1].final_master.tobytes() == sim[1].final_master.tobytes()


def test_tcp_bad_roster_size():
    from zerosim.zerodp import run_tcp

    with pytest.raises(ValueError):
        run_tcp([Stage.POS], RunConfig(Stage.POS, 2, SMALL, batch_size=4), roster=[("127.0.0.1", 1)])


def test_tcp_worker_failure_is_protocol_error():
    from zerosim.zerodp import run_tcp

    # two ranks bound to the same port cannot form a mesh
    with pytest.raises(ProtocolError):
        run_tcp([Stage.POS], RunConfig(Stage.POS, 2, SMALL, steps=1, batch_size=4),
                roster=[("127.0.0.1", 1), ("127.0.0.1", 1)], timeout=2)
