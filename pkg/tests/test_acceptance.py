"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line. Criteria and tolerances are pinned here; nothing is deferred
to later calibration.

Criterion 9 is implemented exactly as stated (10 fixes of sigma 3 m jitter,
95% of trials within 1 m). Ten independent measurements of a constant with
3 m noise bound any estimator's error at about 0.95 m per axis, so the
stated rate is not attainable; the test reports the observed rate honestly.
Criterion 10 (real-dataset run) only executes when IPIN19_DATA_DIR is set.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from fusetrack.features import (
    RecurrenceConfig,
    SensorWindow,
    recurrence_matrix,
)
from fusetrack.ingest import Landmark
from fusetrack.labels import (
    ActivitySegment,
    StepEvent,
    TrackTrajectory,
    WALKING,
)
from fusetrack.neuralcore import (
    Bilstm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2x2,
    Network,
    Softmax,
    cross_entropy_loss,
    gradient_check_network,
    l2_displacement_loss,
    total_loss,
)
from fusetrack.pdr import DisplacementPrediction
from fusetrack.tracking import (
    FusionConfig,
    KalmanState,
    ProjectionIndex,
    WifiFix,
    _project_with_neighbors,
    fuse_track,
    kf_predict,
    kf_update,
    project_prediction,
)

import s1


def report(name: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] {name}: {status} {detail}".rstrip())


# --------------------------------------------------------------------------
# criterion 1: gradient fidelity for every layer kind, 10 seeds, < 2 min

def _layer_cases(rng):
    return [
        ("conv2d", [Conv2D(1, 3, 2, 3, rng)], (1, 5, 7)),
        ("dense", [Dense(10, 6, rng)], (10,)),
        ("maxpool2x2", [Conv2D(1, 2, 2, 2, rng), MaxPool2x2()], (1, 5, 6)),
        ("dropout", [Dense(8, 8, rng), Dropout(0.4)], (8,)),
        ("bilstm", [Bilstm(4, 5, rng)], (1, 4, 6)),
        ("softmax", [Dense(6, 6, rng), Softmax()], (6,)),
    ]


def test_criterion_1_gradient_fidelity():
    t0 = time.time()
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for name, trunk, in_shape in _layer_cases(rng):
            shape = in_shape
            for layer in trunk:
                shape = layer.out_shape(shape)
            flat = int(np.prod(shape))
            layers = trunk + ([Flatten()] if len(shape) > 1 else [])
            net = Network(layers, Dense(flat, 2, rng), Dense(flat, 2, rng), in_shape)
            x = rng.normal(0, 1, (3, *in_shape))
            rep = gradient_check_network(
                net, x, rng.normal(0, 1, (3, 2)), rng.integers(0, 2, 3),
                dropout_seed=seed, seed=seed, max_per_param=24, h=1e-5,
                tolerance=1e-4,
            )
            worst = max(worst, rep.max_relative_error)
            assert rep.passed, f"{name} seed {seed}: {rep}"
    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 120
    report("1 gradient fidelity",
           ok, f"(max rel err {worst:.2e}, {elapsed:.0f}s)")
    assert ok


# criterion 2: loss arithmetic to 1e-9

def test_criterion_2_loss_arithmetic():
    sqrt2 = l2_displacement_loss([(1.0, 1.0)], [(0.0, 0.0)])
    ln2 = cross_entropy_loss([(0.0, 0.0)], [0])
    combo = total_loss(1.0, 0.5, alpha=1.0)
    ok = (abs(sqrt2 - np.sqrt(2.0)) < 1e-9
          and abs(ln2 - np.log(2.0)) < 1e-9
          and abs(combo - 1.5) < 1e-9)
    report("2 loss arithmetic", ok,
           f"(|d_sqrt2|={abs(sqrt2 - np.sqrt(2.0)):.1e})")
    assert ok


# criterion 3: Kalman hand example to 1e-9 plus SPD over 10k random steps

def test_criterion_3_kalman_correctness():
    s = KalmanState(np.zeros(2), np.eye(2), 0, 0.0)
    s = kf_predict(s, (1.0, 0.0), 0.01 * np.eye(2))
    hand_pred = (np.allclose(s.mean, [1.0, 0.0], atol=1e-9)
                 and np.allclose(s.cov, 1.01 * np.eye(2), atol=1e-9))
    s = kf_update(s, (2.0, 0.0), 1.01 * np.eye(2))
    hand_upd = (np.allclose(s.mean, [1.5, 0.0], atol=1e-9)
                and np.allclose(s.cov, 0.505 * np.eye(2), atol=1e-9))
    rng = np.random.default_rng(0)
    s = KalmanState(np.zeros(2), 25.0 * np.eye(2), 0, 0.0)
    spd = True
    for _ in range(10_000):
        if rng.random() < 0.7:
            s = kf_predict(s, rng.normal(0, 1, 2),
                           float(rng.uniform(0, 0.1)) * np.eye(2))
        else:
            s = kf_update(s, rng.normal(0, 3, 2),
                          float(rng.uniform(0.05, 20.0)) * np.eye(2))
        if not (np.allclose(s.cov, s.cov.T, atol=1e-12)
                and np.all(np.linalg.eigvalsh(s.cov) > 0)):
            spd = False
            break
    ok = hand_pred and hand_upd and spd
    report("3 kalman correctness", ok)
    assert ok


# criterion 4: recurrence plots, 1000 random windows

def test_criterion_4_recurrence_plots():
    rng = np.random.default_rng(1)
    ok = True
    for i in range(1000):
        data = rng.normal(0, 1, (12, 50))
        w = SensorWindow(mode="raw", data=data, t_center=0.0)
        eps = float(rng.uniform(0.5, 4.0))
        r1 = recurrence_matrix(w, RecurrenceConfig(epsilon=eps)).data
        r2 = recurrence_matrix(w, RecurrenceConfig(epsilon=2 * eps)).data
        if not (np.array_equal(r1, r1.T)
                and np.array_equal(np.diag(r1), np.ones(50))
                and r1.min() >= 0.0 and r1.max() <= 1.0
                and np.all(r2 >= r1)):
            ok = False
            break
    report("4 recurrence plots", ok, "(1000 windows)")
    assert ok


# criterion 5: pseudo labels on simulator tracks

def test_criterion_5_pseudo_labels():
    from fusetrack.bench import SimScenario, Waypoint, simulate_track
    from fusetrack.features import magnitude_channels, make_windows
    from fusetrack.ingest import parse_logfile, resample_stream
    from fusetrack.labels import (
        detect_activity,
        detect_steps,
        ensure_yaw,
        generate_pseudo_labels,
    )

    scenario = SimScenario(
        waypoints=[Waypoint(0, 0, 0, 3.0), Waypoint(20, 0, 0, 2.0),
                   Waypoint(20, 15, 0, 2.0), Waypoint(0, 15, 0, 2.0)],
        speed=1.2, rng_seed=11)
    result = simulate_track(scenario)
    tmp = Path("/tmp") / "acceptance_c5.log"
    tmp.write_text(result.logfile, encoding="utf-8")
    records, _, landmarks = parse_logfile(tmp)
    stream = magnitude_channels(ensure_yaw(resample_stream(records)))
    activity = detect_activity(stream)
    steps = detect_steps(stream, activity)
    traj = TrackTrajectory(landmarks, steps, activity)
    lms_exact = all(
        np.allclose(traj.position(lm.timestamp), [lm.x, lm.y], atol=1e-12)
        for lm in landmarks)

    windows = make_windows(stream, stride=50)
    samples = generate_pseudo_labels(stream, landmarks, steps, activity, windows)
    # telescope between the first and last covered window spans
    t_first = samples[0].window.t_center - 0.5
    t_last = samples[-1].window.t_center + 0.5
    total = np.sum([s.delta for s in samples], axis=0)
    expected = traj.position(t_last) - traj.position(t_first)
    telescopes = np.allclose(total, expected, atol=1e-9)

    # hand-built 2:1 cadence example
    lms = [Landmark(0.0, 0.0, 0.0, 0), Landmark(10.0, 10.0, 0.0, 0)]
    cadence_steps = ([StepEvent((i + 0.5) * 0.25, 1.0) for i in range(20)]
                     + [StepEvent(5.0 + (i + 0.5) * 0.5, 1.0) for i in range(10)])
    traj2 = TrackTrajectory(lms, cadence_steps,
                            [ActivitySegment(0.0, 10.0, WALKING)], kappa=0.0)
    cadence_ok = np.allclose(traj2.position(5.0), [20 / 30 * 10, 0.0], atol=1e-3)

    ok = lms_exact and telescopes and cadence_ok
    report("5 pseudo labels", ok,
           f"(landmarks exact={lms_exact}, telescope={telescopes}, "
           f"2:1 cadence={cadence_ok})")
    assert ok


# criterion 6: projection bounding box and idempotence, 10k queries

def test_criterion_6_projection():
    rng = np.random.default_rng(2)
    ok = True
    for trial in range(10_000):
        m = int(rng.integers(6, 30))
        pts = np.column_stack([rng.uniform(0, 40, m), rng.uniform(0, 40, m),
                               np.zeros(m)])
        idx = ProjectionIndex(pts, n_neighbors=5)
        q = (float(rng.uniform(-5, 45)), float(rng.uniform(-5, 45)), 0)
        out, neighbors = _project_with_neighbors(idx, q)
        lo = neighbors[:, :2].min(axis=0) - 1e-9
        hi = neighbors[:, :2].max(axis=0) + 1e-9
        in_box = lo[0] <= out[0] <= hi[0] and lo[1] <= out[1] <= hi[1]
        out2 = project_prediction(idx, out)
        idem = np.hypot(out2[0] - out[0], out2[1] - out[1]) <= idx.snap_delta
        if not (in_box and idem):
            ok = False
            break
    report("6 projection", ok, "(10000 queries)")
    assert ok


# criteria 7 and 8: the S1 end-to-end benchmark, seeds 0..4

@pytest.fixture(scope="module")
def s1_reports(tmp_path_factory):
    work = tmp_path_factory.mktemp("s1")
    t0 = time.time()
    reports = {seed: s1.run_seed(seed, work) for seed in range(5)}
    reports["elapsed"] = time.time() - t0
    return reports


def test_criterion_7_end_to_end_simulator(s1_reports):
    elapsed = s1_reports["elapsed"]
    hits = 0
    details = []
    for seed in range(5):
        rep = s1_reports[seed]["full"]
        good = rep.q75 <= 2.5 and rep.mae <= 2.0
        hits += good
        details.append(f"s{seed}: q75={rep.q75:.2f} mae={rep.mae:.2f}")
    ok = hits >= 4 and elapsed <= 15 * 60
    report("7 end-to-end simulator", ok,
           f"({hits}/5 seeds, {elapsed / 60:.1f} min) " + " ".join(details))
    assert ok


def test_reported_deep_vs_classic_endpoint_drift(s1_reports):
    """Reported alongside the criteria: on multi-turn simulator tracks the
    learned model accumulates less endpoint error than the fixed-stride
    step-and-heading baseline."""
    pairs = s1.endpoint_errors(s1_reports[0])
    wins = sum(d < c for d, c in pairs)
    detail = " ".join(f"deep={d:.1f}/classic={c:.1f}" for d, c in pairs)
    report("deep vs classic drift (reported)", wins >= 2, f"({detail})")
    assert wins >= 2  # majority of the held-out tracks


def test_criterion_8_ablation_ordering(s1_reports):
    hits = 0
    details = []
    for seed in range(5):
        full = s1_reports[seed]["full"].q75
        no_wifi = s1_reports[seed]["no_wifi"].q75
        no_prj = s1_reports[seed]["no_prj"].q75
        good = full <= no_wifi and full <= no_prj
        hits += good
        details.append(f"s{seed}: {full:.2f} vs wifi-off {no_wifi:.2f} "
                       f"prj-off {no_prj:.2f}")
    ok = hits >= 4
    report("8 ablation ordering", ok, f"({hits}/5 seeds) " + " ".join(details))
    assert ok


# criterion 9: fusion sanity as literally specified
#
# Ten sigma-3 fixes carry at best sigma 3/sqrt(10) = 0.95 m per axis of
# information about a constant position, so P(|error| <= 1 m) is about 0.42
# for the optimal estimator. The 95% target cannot be met by any filter; the
# test still runs the stated protocol and asserts the stated rate.

def test_criterion_9_fusion_sanity():
    hits = 0
    trials = 100
    for seed in range(trials):
        rng = np.random.default_rng((9, seed))
        preds = [DisplacementPrediction(0.25 + 0.5 * i, np.zeros(2), 1.0)
                 for i in range(80)]
        fixes = [WifiFix(0.5 + 4.0 * i,
                         np.array([10.0, 10.0]) + rng.normal(0.0, 3.0, 2), 3.0)
                 for i in range(10)]
        track = fuse_track(preds, fixes, [], FusionConfig())
        final = track.positions()[-1]
        if np.hypot(final[0] - 10.0, final[1] - 10.0) <= 1.0:
            hits += 1
    ok = hits >= 95
    report("9 fusion sanity", ok,
           f"({hits}/{trials} trials within 1 m after 10 fixes; "
           f"information bound allows about 42)")
    assert ok


# criterion 10: optional real-dataset run, never gating

@pytest.mark.skipif("IPIN19_DATA_DIR" not in os.environ,
                    reason="IPIN'19 logfiles not supplied "
                           "(set IPIN19_DATA_DIR to run)")
def test_criterion_10_optional_dataset_run():
    from fusetrack.bench import run_pipeline

    root = Path(os.environ["IPIN19_DATA_DIR"])
    train_logs = sorted(str(p) for p in (root / "train").glob("*.log"))
    test_logs = sorted(str(p) for p in (root / "validation").glob("*.log"))
    assert train_logs and test_logs, "expected train/ and validation/ logfiles"
    result = run_pipeline({
        "train_logs": train_logs,
        "test_logs": test_logs,
        "out_dir": str(root / "fusetrack_out"),
        "seed": 0,
    })
    # recorded, not asserted: the full-scale target is q75 <= 2.5 m
    report("10 dataset run (optional)", True,
           f"(q75={result.report.q75:.2f} m, target 2.5 m, not gating)")
