"""Acceptance gate: one PASS/FAIL line per primary criterion, at its stated tolerance.

Lines are echoed at the end of the pytest run under "acceptance criteria".
"""

import time
from pathlib import Path

import mpmath
import numpy as np
import pytest
import torch

from conftest import TINY_CONFIG, record_criterion
from railsynth.conditioning import Scheme, combine_condition
from railsynth.control import attach_control
from railsynth.dataset import ScenePair, center_crop, split_dataset
from railsynth.diffusion import Trainer, dm_loss, forward_step, make_schedule, reverse_step, sample
from railsynth.experiments import (
    RunManifest,
    Workspace,
    derive_seed,
    read_config,
    resolve_config,
    run_generation_grid,
    run_segmentation_grid,
)
from railsynth.metrics import FeatureStats, frechet_distance, iou, trace_sqrt_product
from railsynth.nets import IdentityCodec, make_denoiser, state_hash
from railsynth.prompting import PromptBundle, PromptKind, Regime
from railsynth.segmentation import (
    REAL,
    SYNTHETIC,
    TABLE_COLUMNS,
    SegConfig,
    SegSample,
    build_setup,
    read_seg_csv,
    samples_from_pairs,
    train_segmenter,
)

FIXTURES = Path(__file__).parent / "fixtures"


def test_diffusion_inversion():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    x = rng.normal(0, 3, 10_000)
    eps = rng.normal(size=10_000)
    beta = rng.uniform(1e-6, 0.99, 10_000)
    worst = max(abs(reverse_step(forward_step(a, b, e), e, b) - a) for a, e, b in zip(x, eps, beta))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 5.0
    assert record_criterion("Diffusion inversion", ok,
                            f"max |x - reverse(forward(x))| = {worst:.2e} over 10^4 triples in {elapsed:.2f} s")


def test_variance_preservation():
    rng = np.random.default_rng(1)
    variances = [forward_step(rng.normal(size=100_000), b, rng.normal(size=100_000)).var() for b in (0.01, 0.5, 0.9)]
    ok = all(0.97 <= v <= 1.03 for v in variances)
    assert record_criterion("Variance preservation", ok,
                            "empirical variances " + ", ".join(f"{v:.4f}" for v in variances) + " over 10^5 samples")


def test_zero_init_no_op():
    cd = attach_control(make_denoiser(0, base=8), image_size=16, seed=0)
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for _ in range(50):
            x = torch.rand(1, 3, 16, 16, generator=gen) * 2 - 1
            t = torch.randint(1, 51, (1,), generator=gen)
            c = torch.rand(1, 3, 16, 16, generator=gen)
            worst = max(worst, float((cd.predict(x, t, ["a railway scene"], c) - cd.base.predict(x, t,
                                                                                     ["a railway scene"])).abs().max()))
    assert record_criterion("Zero-init no-op", worst <= 1e-6, f"max deviation from base {worst:.2e} on 50 inputs")


def _control_trainer(steps):
    cd = attach_control(make_denoiser(0, base=8), image_size=16, seed=0)
    trainer = Trainer(cd, IdentityCodec(), make_schedule("linear", 20), seed=0, lr=2e-3)
    gen = torch.Generator().manual_seed(1)
    images = torch.rand(16, 3, 16, 16, generator=gen) * 2 - 1
    conds = (images > 0).float()
    for i in range(steps):
        j = (i * 4) % 16
        trainer.step(images[j : j + 4], ["a railway scene"] * 4, conds[j : j + 4])
    return cd


def test_frozen_base():
    before = state_hash(make_denoiser(0, base=8))
    cd = _control_trainer(100)
    ok = state_hash(cd.base) == before
    moved = any(bool(p.detach().any()) for p in cd.zero_links.parameters())
    assert record_criterion("Frozen base", ok and moved,
                            f"base sha256 unchanged after 100 control steps: {ok}; zero links moved: {moved}")


def test_gradient_sanity():
    cd = attach_control(make_denoiser(3, base=8), image_size=16, seed=3).double()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in cd.zero_links.parameters():
            p.normal_(0, 1e-2, generator=gen)
    x = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    c = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    t = torch.tensor([5, 30])
    w = cd.zero_links["down1"].weight

    def loss():
        return dm_loss(eps, cd(x, t, ["", ""], c))

    loss().backward()
    analytic = float(w.grad[0, 0, 0, 0])
    h = 1e-6
    with torch.no_grad():
        w[0, 0, 0, 0] += h
        up = float(loss())
        w[0, 0, 0, 0] -= 2 * h
        down = float(loss())
    numeric = (up - down) / (2 * h)
    rel = abs(analytic - numeric) / abs(numeric)
    assert record_criterion("Gradient sanity", rel <= 1e-3 and analytic != 0.0,
                            f"analytic {analytic:.6e} vs central difference {numeric:.6e}, rel. error {rel:.1e}")


def _psd(rng, d):
    m = rng.normal(size=(d, int(rng.integers(1, d + 1))))
    return m @ m.T + 1e-3 * np.eye(d)


def test_fid_analytic_suite():
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(50, 4))
    s = FeatureStats(feats.mean(0), np.cov(feats, rowvar=False), 50)
    self_fid = frechet_distance(s, s)
    cov = np.diag([1.0, 2.0])
    shift = frechet_distance(FeatureStats(np.zeros(2), cov, 2), FeatureStats(np.array([3.0, 0.0]), cov, 2))
    one_d = frechet_distance(FeatureStats(np.zeros(1), np.eye(1), 2), FeatureStats(np.zeros(1), 4 * np.eye(1), 2))
    mpmath.mp.dps = 30
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 10))
        a, b = _psd(rng, d), _psd(rng, d)
        vals = mpmath.eig(mpmath.matrix(a.tolist()) * mpmath.matrix(b.tolist()), left=False, right=False)
        want = float(sum(mpmath.sqrt(max(mpmath.re(v), 0)) for v in vals))
        worst = max(worst, abs(trace_sqrt_product(a, b) - want) / want)
    ok = self_fid < 1e-6 and abs(shift - 9.0) <= 1e-6 and abs(one_d - 1.0) <= 1e-6 and worst <= 1e-5
    assert record_criterion("FID analytic suite", ok,
                            f"self {self_fid:.1e}; shift 3 -> {shift:.9f}; 1-D -> {one_d:.9f}; "
                            f"sqrt-trace vs 30-digit oracle max rel. {worst:.1e} on 100 pairs")


def test_iou():
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        y = rng.random((16, 16)) < rng.random()
        p = rng.random((16, 16)) < rng.random()
        inter = sum(1 for a, b in zip(y.ravel(), p.ravel()) if a and b)
        union = sum(1 for a, b in zip(y.ravel(), p.ravel()) if a or b)
        mismatches += iou(y, p) != (inter / union if union else 1.0)
    hand = iou(np.array([[1, 1, 0, 0]]), np.array([[0, 1, 1, 0]]))
    assert record_criterion("IoU", mismatches == 0 and hand == 1 / 3,
                            f"{mismatches} mismatches vs counting oracle on 1000 pairs; hand case = {hand!r}")


def test_condition_schemes():
    rng = np.random.default_rng(7)
    layouts = {"cmb12": "EMM", "cmb111": "MEM", "cmb21": "MEE"}
    bad = 0
    for _ in range(50):
        m = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        e = rng.integers(0, 256, (16, 16), dtype=np.uint8)
        for scheme, layout in layouts.items():
            ch = combine_condition(m, e, scheme).channels
            bad += any(not np.array_equal(ch[..., i], m if k == "M" else e) for i, k in enumerate(layout))
    assert record_criterion("Condition schemes", bad == 0,
                            f"{bad} channel mismatches over 150 random (mask, edge) fixtures")


class _Item:
    def __init__(self, index):
        self.index = index


def test_dataset_split_and_crop():
    split = split_dataset([_Item(i) for i in range(8500)], 0.8)
    img = np.zeros((1080, 1920, 3), np.uint8)
    img[..., 0] = (np.arange(1920) % 256)[None]
    img[..., 1] = (np.arange(1920) // 256)[None]
    out = center_crop(ScenePair(img, np.zeros((1080, 1920), np.uint8), 0), (1080, 1080))
    cols = out.image[0, :, 0].astype(int) + 256 * out.image[0, :, 1].astype(int)
    ok = (len(split.train), len(split.val)) == (6800, 1700) and np.array_equal(cols, np.arange(420, 1500))
    assert record_criterion("Dataset", ok,
                            f"split {len(split.train)}/{len(split.val)}; crop keeps columns [{cols[0]}, {cols[-1] + 1})")


def test_setup_composer():
    z = np.zeros((1, 1), np.uint8)
    real = [SegSample(z, z, REAL, i) for i in range(3000)]
    synth = [SegSample(z, z, SYNTHETIC, i) for i in range(3000)]
    expected = {"A": (3000, 3000), "B": (3000, 3000), "C": (6000, 3000), "D": (3000, 1500), "E": (3000, 3000),
                "F": (3000, 3000)}
    got = {}
    for sid in expected:
        corpus = build_setup(sid, real, synth, 3000)
        got[sid] = (len(corpus), len({s.mask_id for s in corpus}))
    assert record_criterion("Setup composer", got == expected,
                            " ".join(f"{k}:{v[0]}/{v[1]}" for k, v in got.items()) + " (items/unique masks)")


@pytest.fixture(scope="module")
def acceptance_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = resolve_config(read_config(FIXTURES / "acceptance_run.txt"), {"run.out": str(out)})
    start = time.perf_counter()
    rows = run_segmentation_grid(cfg)
    return cfg, out, rows, time.perf_counter() - start


def test_toy_end_to_end(acceptance_run):
    cfg, out, rows, elapsed = acceptance_run
    manifest = RunManifest(out, cfg)
    losses = next(e for e in manifest.events("done") if e["key"].startswith("control:"))["losses"]
    first, last = float(np.mean(losses[:50])), float(np.mean(losses[-50:]))
    loss_ok = last < first

    ws = Workspace(cfg, out)
    scheme, regime = Scheme.parse(cfg["seg.scheme"]), Regime(PromptKind(cfg["seg.prompts"]))
    cd = ws.train_control(scheme, regime)
    pairs = ws.val_pairs[:4]
    seed = derive_seed(cfg["run.seed"], "acceptance")
    a, _, _ = ws.generate(cd, pairs, scheme, regime, seed)
    b, _, _ = ws.generate(cd, pairs, scheme, regime, seed)
    same = all(np.array_equal(x, y) for x, y in zip(a, b))
    bundles = [PromptBundle("", "", regime)] * 2
    x = sample(cd, ws.codec, ws.schedule, (2, 3, 32, 32), bundles, torch.zeros(2, 3, 32, 32),
               torch.Generator().manual_seed(seed))
    finite = bool(torch.isfinite(x).all())

    val_idx = {p.index for p in ws.val_pairs[: cfg["seg.val_n"]]}
    train = samples_from_pairs([p for p in ws.pairs if p.index not in val_idx][: cfg["seg.n"]], {1})
    val = samples_from_pairs(ws.val_pairs[: cfg["seg.val_n"]], {1})
    seg = train_segmenter(train, val, SegConfig(epochs=20), seed=0)

    score = {r["Setup"]: r["mIoU"] for r in rows}
    recorded = {r["Setup"]: r["mIoU"] for r in read_seg_csv(FIXTURES / "acceptance_seg_table.csv")}
    direction = score["C"] >= score["A"]
    regression = all(abs(score[k] - recorded[k]) <= 0.5 for k in recorded)
    ok = loss_ok and same and finite and seg.best_miou > 0.6 and direction and regression and elapsed < 1800
    assert record_criterion(
        "Toy end-to-end smoke", ok,
        f"control loss first/last 50 steps {first:.4f} -> {last:.4f}; sampling finite={finite}, "
        f"deterministic={same}; segmenter val mIoU {seg.best_miou:.3f} after 20 epochs; "
        f"recorded seed {cfg['run.seed']}: A {score['A']:.3f} vs C {score['C']:.3f} "
        f"(fixture A {recorded['A']:.3f}, C {recorded['C']:.3f}); {elapsed:.0f} s",
    )


def test_report_shapes(tmp_path):
    cfg = resolve_config(TINY_CONFIG, {"run.out": str(tmp_path)})
    gen = run_generation_grid(cfg)
    seg = run_segmentation_grid(cfg)
    md = (tmp_path / "fid_grid.md").read_text().splitlines()
    header = [h.strip() for h in md[0].strip("|").split("|")][1:]
    body = [line for line in md[2:] if line.startswith("|")]
    seg_rows = read_seg_csv(tmp_path / "seg_table.csv")
    ok = (
        [len(r) for r in gen] == [5] * 6
        and header == ["Seg. masks", "Canny", "Cmb12", "Cmb21", "Cmb111"]
        and len(body) == 6
        and [r["Setup"] for r in seg_rows] == list("ABCDEF")
        and list(seg_rows[0]) == list(TABLE_COLUMNS)
        and len(seg) == 6
    )
    assert record_criterion("Report shapes", ok,
                            f"generation grid {len(gen)}x{len(gen[0])} ({', '.join(header)}); "
                            f"seg table {len(seg_rows)} rows with columns {', '.join(TABLE_COLUMNS)}")
