"""Acceptance criteria 1-11.

Each test records one ``criterion NN PASS|FAIL`` line (collected into the
terminal summary by conftest.py) and then asserts the same outcome, so a
failing criterion is both reported and a failing test.
"""

import json
import time

import numpy as np
import pytest

from acceptance_log import record
from op_cases import CASES, SHAPES
from oracles import conv2d_loops, conv_transpose2d_loops, sobel_loops
from stagegen import ndtensor as nd
from stagegen.checkpoint import CheckpointError, dumps, load_checkpoint, loads
from stagegen.dataset import PairedImages, load_split, synth_faces
from stagegen.imageops import (
    ImageBuffer,
    array_to_model_range,
    model_range_to_pixels,
    sobel_edges,
    to_grayscale,
)
from stagegen.metrics import GaussianStats, contraction_probe, fid_score, fit_embedder, frechet_distance, \
    matrix_sqrt_psd
from stagegen.models import (
    ModelSpec,
    Network,
    init_discriminator,
    init_params,
    sample_latent,
    stage2_generator,
)
from stagegen.ndtensor import Tensor
from stagegen.pipeline import run_stack, subset_experiment
from stagegen.training import (
    LossLog,
    TrainConfig,
    TrainState,
    generator_from_checkpoint,
    sample_edges,
    train_stage1,
    train_stage1_arrays,
    train_stage2,
    train_stage2_arrays,
)

SMOKE_SPEC = ModelSpec(image_side=32)
SMOKE_STEPS = 300
SUBSET_BUDGET = 2000
SUBSET_SEEDS = [0, 1, 2]
N_FAKE = 512


def _cpu():
    return time.process_time()


def _window_means(values, frac=0.1):
    w = max(1, int(len(values) * frac))
    return float(np.mean(values[:w])), float(np.mean(values[-w:]))


def _moving_average(values, width):
    kernel = np.ones(width) / width
    return np.convolve(values, kernel, mode="valid")


# ---------------------------------------------------------------------------
# shared runs
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def corpus(workdir):
    return synth_faces(512, 32, seed=7, out_dir=workdir / "faces512")


@pytest.fixture(scope="module")
def all_records(corpus):
    return load_split(corpus, None)


@pytest.fixture(scope="module")
def edge_embedder(corpus):
    return fit_embedder(corpus, seed=0, modality="edge")


@pytest.fixture(scope="module")
def gray_embedder(corpus):
    return fit_embedder(corpus, seed=0, modality="gray")


def _stage1_config():
    return TrainConfig(stage=1, steps=SMOKE_STEPS, batch_size=64, seed=0, checkpoint_every=SMOKE_STEPS // 2,
                       model=SMOKE_SPEC)


def _stage2_config():
    return TrainConfig(stage=2, epochs=1, batch_size=1, seed=0, checkpoint_every=100, model=SMOKE_SPEC)


@pytest.fixture(scope="module")
def stage1_smoke(workdir, corpus):
    config = _stage1_config()
    start = _cpu()
    ckpt, log = train_stage1(config, corpus, out_dir=workdir / "stage1")
    return {"config": config, "ckpt": ckpt, "log": log, "cpu": _cpu() - start, "dir": workdir / "stage1",
            "initial": TrainState.fresh(config).to_checkpoint()}


@pytest.fixture(scope="module")
def stage2_smoke(workdir, corpus):
    config = _stage2_config()
    start = _cpu()
    ckpt, log = train_stage2(config, corpus, out_dir=workdir / "stage2")
    return {"config": config, "ckpt": ckpt, "log": log, "cpu": _cpu() - start, "dir": workdir / "stage2"}


@pytest.fixture(scope="module")
def subset_corpus(workdir):
    return synth_faces(2000, 32, seed=11, out_dir=workdir / "faces2000")


@pytest.fixture(scope="module")
def subset_embedder(subset_corpus):
    return fit_embedder(subset_corpus, seed=0, modality="edge")


@pytest.fixture(scope="module")
def subset_run(workdir, subset_corpus, subset_embedder):
    config = TrainConfig(stage=1, batch_size=64, model=SMOKE_SPEC)
    start = time.perf_counter()
    report = subset_experiment(subset_corpus, [0.25, 1.0], SUBSET_BUDGET, SUBSET_SEEDS, config=config,
                               embedder=subset_embedder, n_fake=N_FAKE, out_dir=workdir / "subset")
    return {"report": report, "wall": time.perf_counter() - start, "config": config, "dir": workdir / "subset"}


# ---------------------------------------------------------------------------
# 1-4: numerical building blocks
# ---------------------------------------------------------------------------

def test_01_gradient_correctness():
    start = _cpu()
    worst = {}
    for name, build in CASES.items():
        errs = []
        for i, shape in enumerate(SHAPES):
            fn, inputs = build(np.random.default_rng([i, 7]), shape)
            errs.append(nd.grad_check(fn, inputs, seed=i))
        worst[name] = max(errs)

    spec = ModelSpec(image_side=32, base_feature_maps_g=8, base_feature_maps_d=8, resnet_blocks=1)
    g2 = init_params(spec, 3)["g2"].astype(np.float64)
    rng = np.random.default_rng(4)
    edge = rng.uniform(-1, 1, (1, 1, 32, 32))
    target = Tensor(rng.uniform(-1, 1, (1, 1, 32, 32)))
    names = list(g2.params)

    def composite(e, *weights):
        net = Network(dict(zip(names, weights)), g2.buffers)
        return nd.l1_loss(stage2_generator(e, net, spec), target)

    composite_err = nd.grad_check(composite, [edge] + [g2[n].data for n in names], max_checks=6, seed=0)
    cpu = _cpu() - start
    op_name, op_err = max(worst.items(), key=lambda kv: kv[1])
    passed = op_err <= 1e-4 and composite_err <= 1e-3 and cpu < 120
    record(1, "gradient correctness", passed,
           f"{len(CASES)} ops x {len(SHAPES)} shapes, worst {op_name} {op_err:.2e} (<=1e-4); "
           f"stage-2 generator + L1 {composite_err:.2e} (<=1e-3); {cpu:.1f}s CPU (<120s)")
    assert passed


def _conv_case(rng, transpose):
    n, cin, cout = (int(v) for v in rng.integers(1, 4, 3))
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, (k + 1) // 2))
    if transpose:
        h, w = (int(v) for v in rng.integers(2, 6, 2))
        weight = rng.standard_normal((cin, cout, k, k))
    else:
        h, w = (int(v) for v in rng.integers(k, k + 6, 2))
        weight = rng.standard_normal((cout, cin, k, k))
    return rng.standard_normal((n, cin, h, w)), weight, rng.standard_normal(cout), stride, padding


def test_02_convolution_oracles():
    start = _cpu()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 2])
        transpose = seed % 2 == 1
        x, w, b, stride, padding = _conv_case(rng, transpose)
        if transpose:
            got = nd.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
            want = conv_transpose2d_loops(x, w, b, stride, padding)
        else:
            got = nd.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
            want = conv2d_loops(x, w, b, stride, padding)
        assert got.shape == want.shape
        worst = max(worst, float(np.abs(got - want).max()))

    adjoint = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 3])
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        k = int(rng.integers(padding + 1, 5))
        # extents where conv2d drops no rows, so conv_transpose2d is its exact adjoint
        h = stride * int(rng.integers(1, 5)) + k - 2 * padding
        x = rng.standard_normal((2, 3, h, h))
        w = rng.standard_normal((4, 3, k, k))
        y = rng.standard_normal(nd.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).shape)
        lhs = float(np.sum(nd.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data * y))
        rhs = float(np.sum(x * nd.conv_transpose2d(Tensor(y), Tensor(w), stride=stride, padding=padding).data))
        adjoint = max(adjoint, abs(lhs - rhs) / max(abs(lhs), 1.0))
    cpu = _cpu() - start
    passed = worst <= 1e-5 and adjoint <= 1e-4 and cpu < 60
    record(2, "convolution oracles", passed,
           f"20 cases max abs diff {worst:.2e} (<=1e-5); adjoint rel err {adjoint:.2e} (<=1e-4); "
           f"{cpu:.1f}s CPU (<60s)")
    assert passed


def _random_stats(rng, d):
    a = rng.standard_normal((d, d + int(rng.integers(0, 3)) - 1))
    return GaussianStats(rng.standard_normal(d) * 3, a @ a.T, 10)


def test_03_frechet_closed_forms():
    start = _cpu()
    rng = np.random.default_rng(3)
    s = _random_stats(rng, 5)
    self_dist = frechet_distance(s, s, eps_reg=0.0)
    one_d = frechet_distance(GaussianStats([0.0], [[1.0]], 2), GaussianStats([1.0], [[1.0]], 2), eps_reg=0.0)
    # (0,0) diag(1,4) vs (1,1) diag(4,1): |dmu|^2 = 2, sum (sqrt a - sqrt b)^2 = 2
    two_d = frechet_distance(GaussianStats([0.0, 0.0], np.diag([1.0, 4.0]), 2),
                             GaussianStats([1.0, 1.0], np.diag([4.0, 1.0]), 2), eps_reg=0.0)
    sym = trans = recon = 0.0
    for i in range(100):
        r = np.random.default_rng([i, 30])
        d = int(r.integers(1, 7))
        a, b = _random_stats(r, d), _random_stats(r, d)
        ab = frechet_distance(a, b, eps_reg=0.0)
        sym = max(sym, abs(ab - frechet_distance(b, a, eps_reg=0.0)))
        shift = r.standard_normal(d) * 5
        moved = frechet_distance(GaussianStats(a.mean + shift, a.cov, a.n), GaussianStats(b.mean + shift, b.cov, b.n),
                                 eps_reg=0.0)
        trans = max(trans, abs(ab - moved))
        root = matrix_sqrt_psd(a.cov)
        recon = max(recon, np.linalg.norm(root @ root - a.cov) / max(np.linalg.norm(a.cov), 1e-300))
    cpu = _cpu() - start
    passed = (self_dist <= 1e-8 and abs(one_d - 1.0) <= 1e-9 and abs(two_d - 4.0) <= 1e-9 and sym <= 1e-9
              and trans <= 1e-9 and recon <= 1e-6 and cpu < 60)
    record(3, "Frechet closed forms", passed,
           f"self {self_dist:.1e}; 1-D {one_d!r}; 2-D {two_d!r}; symmetry {sym:.1e}; translation {trans:.1e} "
           f"over 100 pairs; sqrt reconstruction {recon:.1e}; {cpu:.2f}s CPU")
    assert passed


def test_04_imageops_oracles():
    start = _cpu()
    sobel_ok = all(
        np.array_equal(sobel_edges(ImageBuffer.from_array(arr)).plane, sobel_loops(arr))
        for arr in (np.random.default_rng([s, 4]).integers(0, 256, (8, 8), dtype=np.uint8) for s in range(20)))
    constant_ok = not sobel_edges(ImageBuffer.from_array(np.full((8, 8), 131, np.uint8))).plane.any()
    step = np.zeros((8, 8), np.uint8)
    step[:, 4:] = 255
    out = sobel_edges(ImageBuffer.from_array(step)).plane
    step_ok = bool(np.all(out[:, 3:5] == 255) and not out[:, :2].any() and not out[:, 6:].any())
    red = int(to_grayscale(ImageBuffer.from_array(np.array([[[255, 0, 0]]], np.uint8))).plane[0, 0])
    levels = np.arange(256, dtype=np.uint8)
    round_trip = np.array_equal(model_range_to_pixels(array_to_model_range(levels)), levels)
    cpu = _cpu() - start
    passed = sobel_ok and constant_ok and step_ok and red == 76 and round_trip and cpu < 30
    record(4, "imageops oracles", passed,
           f"sobel vs loops on 20 8x8 inputs {sobel_ok}; constant {constant_ok}; step saturates {step_ok}; "
           f"gray(255,0,0)={red}; 256-level round trip {round_trip}; {cpu:.2f}s CPU")
    assert passed


# ---------------------------------------------------------------------------
# 5-9: training and evaluation
# ---------------------------------------------------------------------------

def _edge_fid(ckpt, embedder, reference, seed=0):
    g1, spec, _ = generator_from_checkpoint(ckpt)
    fake = sample_edges(g1, spec, N_FAKE, np.random.default_rng([seed, 4]))
    return fid_score(embedder, reference, fake).fid


@pytest.mark.slow
def test_05_stage1_smoke(stage1_smoke, edge_embedder, all_records):
    log = stage1_smoke["log"]
    finite = all(np.isfinite(log.column(c)).all() for c in ("d_loss", "d_loss_real", "d_loss_fake", "g_loss_adv"))
    before = _edge_fid(stage1_smoke["initial"], edge_embedder, all_records.edges)
    after = _edge_fid(stage1_smoke["ckpt"], edge_embedder, all_records.edges)
    drop = 1.0 - after / before
    cpu = stage1_smoke["cpu"]
    passed = finite and len(log.rows) == SMOKE_STEPS and drop >= 0.30 and cpu < 600
    record(5, "stage-1 smoke training", passed,
           f"{len(log.rows)} steps, losses finite {finite}; edge FID {before:.1f} -> {after:.1f} "
           f"({100 * drop:.1f}% drop, need >=30%); {cpu:.0f}s CPU (<600s)")
    assert passed


@pytest.mark.slow
def test_05b_discriminator_real_loss_settles(stage1_smoke):
    # reference check: the discriminator beats chance on real samples by the end
    assert stage1_smoke["log"].column("d_loss_real")[-50:].mean() < np.log(2)


@pytest.mark.slow
def test_05c_embedder_learns(edge_embedder, gray_embedder):
    for emb in (edge_embedder, gray_embedder):
        assert emb.info["eval_l1_final"] <= 0.5 * emb.info["eval_l1_start"]


@pytest.mark.slow
def test_05d_fid_separates_noise(edge_embedder, all_records):
    rng = np.random.default_rng(5)
    half = len(all_records) // 2
    floor = fid_score(edge_embedder, all_records.edges[:half], all_records.edges[half:]).fid
    noise = rng.uniform(-1, 1, all_records.edges.shape).astype(np.float32)
    assert fid_score(edge_embedder, all_records.edges, noise).fid >= 10 * floor


def _identity_variant(corpus):
    train = load_split(corpus, "train")
    data = PairedImages(train.ids, train.edges, train.edges.copy())
    config = TrainConfig(stage=2, steps=500, batch_size=1, seed=0, model=SMOKE_SPEC)
    return train_stage2_arrays(config, data)


@pytest.mark.slow
def test_06_stage2_smoke(stage2_smoke, corpus):
    start = _cpu()
    l1 = stage2_smoke["log"].column("g_loss_l1")
    lead, trail = _window_means(l1)
    finite = all(np.isfinite(stage2_smoke["log"].column(c)).all() for c in ("d_loss", "g_loss_adv", "g_loss_l1"))
    _, ident_log = _identity_variant(corpus)
    ident = _moving_average(ident_log.column("g_loss_l1"), 25)
    best = float(ident.min())
    cpu = stage2_smoke["cpu"] + _cpu() - start
    passed = finite and trail < lead and best < 0.05 and cpu < 600
    record(6, "stage-2 smoke training", passed,
           f"{len(l1)} steps at batch 1, windowed L1 lead {lead:.3f} -> trail {trail:.3f}; identity task best "
           f"25-step mean L1 {best:.3f} in 500 steps (need <0.05); {cpu:.0f}s CPU (<600s)")
    assert passed


@pytest.mark.slow
def test_07_subset_direction(subset_run):
    report = subset_run["report"]
    med = report["median_fid"]
    per_seed = ", ".join(f"s{r['seed']}/{r['fraction']:g}={r['fid']:.1f}" for r in report["rows"])
    wall = subset_run["wall"]
    passed = med["0.25"] > med["1"] and report["equal_step_budget"] and wall < 45 * 60
    record(7, "subset-diversity direction", passed,
           f"median FID 0.25 -> {med['0.25']:.1f}, 1.0 -> {med['1']:.1f} at {SUBSET_BUDGET} steps "
           f"({per_seed}); {wall / 60:.1f} min wall (<45)")
    assert passed


@pytest.mark.slow
def test_08_stage_ordering_observation(stage1_smoke, stage2_smoke, edge_embedder, gray_embedder, all_records,
                                       workdir):
    z = sample_latent(N_FAKE, SMOKE_SPEC.latent_dim, np.random.default_rng([0, 8]))
    edges, grays = run_stack(stage1_smoke["ckpt"], stage2_smoke["ckpt"], z)
    edge_fid = fid_score(edge_embedder, all_records.edges, edges.data)
    gray_fid = fid_score(gray_embedder, all_records.grays, grays.data)
    artifact = {
        "fid_edge": edge_fid.to_dict(),
        "fid_gray": gray_fid.to_dict(),
        "gray_below_edge": gray_fid.fid < edge_fid.fid,
        "note": "edge and gray scores use separate embedders fitted on their own modality",
    }
    path = workdir / "stage_ordering.json"
    path.write_text(json.dumps(artifact, indent=2, sort_keys=True) + "\n")
    loaded = json.loads(path.read_text())
    passed = np.isfinite(loaded["fid_edge"]["fid"]) and np.isfinite(loaded["fid_gray"]["fid"])
    record(8, "stage-ordering observation", passed,
           f"edge FID {edge_fid.fid:.2f}, gray FID {gray_fid.fid:.2f}, both finite; "
           f"observed gray < edge: {artifact['gray_below_edge']} (reported only)")
    assert passed


@pytest.mark.slow
def test_09_contraction_probe(stage2_smoke, corpus):
    edges = load_split(corpus, "eval").edges
    reports = [contraction_probe(stage2_smoke["ckpt"], edges, sigma, 64, seed=0) for sigma in (0.01, 0.1)]
    produced = all(r["n_pairs"] == 64 and np.isfinite(r["mean_ratio"]) for r in reports)
    const = contraction_probe(lambda x: np.zeros_like(x), edges, 0.1, 64)
    ident = contraction_probe(lambda x: x, edges, 0.1, 64)
    passed = produced and const["fraction_contractive"] == 1.0 and 0.95 <= ident["mean_ratio"] <= 1.05
    summary = "; ".join(f"sigma {r['perturb_sigma']}: contractive {r['fraction_contractive']:.2f}, "
                        f"mean ratio {r['mean_ratio']:.3f}" for r in reports)
    record(9, "contraction probe", passed,
           f"{summary}; constant double {const['fraction_contractive']}; identity mean {ident['mean_ratio']:.4f}")
    assert passed


# ---------------------------------------------------------------------------
# 10-11: persistence and architecture flags
# ---------------------------------------------------------------------------

def _same_run(a_ckpt, a_log, b_ckpt, b_log):
    return dumps(a_ckpt) == dumps(b_ckpt) and a_log.deterministic() == b_log.deterministic()


@pytest.mark.slow
def test_10_determinism_and_persistence(stage1_smoke, stage2_smoke, subset_run, subset_corpus, subset_embedder,
                                        corpus, workdir):
    checks = {}
    ckpt, log = train_stage1(_stage1_config(), corpus, out_dir=workdir / "stage1_again")
    checks["stage-1 rerun"] = _same_run(ckpt, log, stage1_smoke["ckpt"], stage1_smoke["log"])
    checks["stage-1 checkpoints"] = all(
        p.read_bytes() == (workdir / "stage1_again/checkpoints" / p.name).read_bytes()
        for p in (stage1_smoke["dir"] / "checkpoints").iterdir())
    ckpt, log = train_stage2(_stage2_config(), corpus)
    checks["stage-2 rerun"] = _same_run(ckpt, log, stage2_smoke["ckpt"], stage2_smoke["log"])

    seed, frac = SUBSET_SEEDS[0], 0.25
    again = subset_experiment(subset_corpus, [frac], SUBSET_BUDGET, [seed], config=subset_run["config"],
                              embedder=subset_embedder, n_fake=N_FAKE, out_dir=workdir / "subset_again")
    original = next(r for r in subset_run["report"]["rows"] if r["seed"] == seed and r["fraction"] == frac)
    run = f"seed{seed}_frac{frac:g}"
    checks["subset run rerun"] = (
        again["rows"][0] == original
        and (workdir / "subset_again" / run / "checkpoints/final.sgck").read_bytes()
        == (subset_run["dir"] / run / "checkpoints/final.sgck").read_bytes()
        and LossLog.from_csv(workdir / "subset_again" / run / "losses_stage1.csv").deterministic()
        == LossLog.from_csv(subset_run["dir"] / run / "losses_stage1.csv").deterministic())

    mid1 = stage1_smoke["dir"] / f"checkpoints/step_{SMOKE_STEPS // 2:07d}.sgck"
    ckpt, log = train_stage1(_stage1_config(), corpus, resume=mid1)
    checks["stage-1 resume"] = (dumps(ckpt) == dumps(stage1_smoke["ckpt"])
                                and log.deterministic() == stage1_smoke["log"].deterministic()[SMOKE_STEPS // 2:])
    mid2 = stage2_smoke["dir"] / "checkpoints/step_0000200.sgck"
    ckpt, log = train_stage2(_stage2_config(), corpus, resume=mid2)
    checks["stage-2 resume"] = (dumps(ckpt) == dumps(stage2_smoke["ckpt"])
                                and log.deterministic() == stage2_smoke["log"].deterministic()[200:])

    blob = bytearray(mid1.read_bytes())
    detected = 0
    positions = np.random.default_rng(10).integers(0, len(blob), 25)
    for pos in positions:
        bad = bytearray(blob)
        bad[pos] ^= 0x5A
        try:
            loads(bytes(bad))
        except CheckpointError:
            detected += 1
    try:
        loads(bytes(blob[:-7]))
        truncated = False
    except CheckpointError:
        truncated = True
    checks["corruption detected"] = detected == len(positions) and truncated
    checks["clean load"] = dumps(load_checkpoint(mid1)) == bytes(blob)

    passed = all(checks.values())
    record(10, "determinism and persistence", passed,
           ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items())
           + f" ({detected}/{len(positions)} flipped bytes caught)")
    assert passed


def test_11_architecture_flags():
    base = ModelSpec(image_side=64)
    full = ModelSpec(image_side=64, disc_reduction_factor=1)
    rng = np.random.default_rng(0)
    ratio = init_discriminator(base, rng, 1).n_params() / init_discriminator(full, rng, 1).n_params()

    small = dict(image_side=32, base_feature_maps_g=8, resnet_blocks=2)
    plain, dropped = ModelSpec(**small), ModelSpec(**small, dropout_enabled=True)
    g2 = init_params(plain, 1)["g2"]
    edge = Tensor(np.random.default_rng(2).uniform(-1, 1, (2, 1, 32, 32)).astype(np.float32))
    with nd.no_grad():
        train_plain = stage2_generator(edge, g2, plain, training=True).data
        train_drop = stage2_generator(edge, g2, dropped, training=True, rng=np.random.default_rng(3)).data
        eval_plain = stage2_generator(edge, g2, plain, training=False).data
        eval_drop = stage2_generator(edge, g2, dropped, training=False, rng=np.random.default_rng(3)).data
    dropout_ok = not np.array_equal(train_plain, train_drop) and np.array_equal(eval_plain, eval_drop)

    latent = ModelSpec(**small, stage2_latent_enabled=True)
    g2z = init_params(latent, 1)["g2"]
    za, zb = (sample_latent(2, latent.latent_dim, np.random.default_rng(s)) for s in (4, 5))
    with nd.no_grad():
        out_a = stage2_generator(edge, g2z, latent, za, training=False).data
        out_a2 = stage2_generator(edge, g2z, latent, za, training=False).data
        out_b = stage2_generator(edge, g2z, latent, zb, training=False).data
    z2_ok = np.array_equal(out_a, out_a2) and float(np.abs(out_a - out_b).max()) > 0

    passed = ratio < 1 / 8 and dropout_ok and z2_ok
    record(11, "architecture flags", passed,
           f"discriminator params ratio (factor 4 vs 1) {ratio:.4f} (<0.125); dropout train differs / eval equal "
           f"{dropout_ok}; z2 changes output {z2_ok}")
    assert passed
