"""Acceptance gate. Each criterion prints one PASS/FAIL line with the measured values.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
repeated in the terminal summary.
"""
import math

import numpy as np
import pytest
import torch

from ocnet import config as config_mod
from ocnet import kernels
from ocnet.cli import main
from ocnet.config import RunConfig
from ocnet.data import SyntheticConfig, file_hashes, generate_synthetic, load_reid_directory
from ocnet.heads import CenterFocus, Converter, center_window
from ocnet.losses import LossWeights, aggregate, separation_loss, total_loss
from ocnet.model import OCNet
from ocnet.pipeline import ABLATION_COLUMNS, evaluate, feature_cosines, load_split, train
from ocnet.relation import RelationAdaptive, correct
from ocnet.retrieval import GalleryRecord, cmc_map, fused_distance
from oracles import brute_force_eval, central_fd_grad, rel_err

RESULTS: list[str] = []


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        RESULTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return emit


# -- 1 ----------------------------------------------------------------------------------

def test_criterion_01_separation_loss(verdict, float64):
    g = torch.tensor([[1.0, 0.0, 0.0]])
    cases = [separation_loss(g, g.clone(), g.clone()).item(),
             separation_loss(g, torch.tensor([[0.0, 1.0, 0.0]]), torch.tensor([[0.0, 0.0, 1.0]])).item(),
             separation_loss(g, -g, -g).item()]
    err_cases = max(abs(a - b) for a, b in zip(cases, (4.0, 2.0, 0.0)))

    gen = torch.Generator().manual_seed(1)
    err_scale = 0.0
    for _ in range(20):
        fg, ft, fb = (torch.randn(4, 8, generator=gen) for _ in range(3))
        s = torch.rand(3, 4, 1, generator=gen) * 10 + 0.1
        base = separation_loss(fg, ft, fb)
        err_scale = max(err_scale, abs((separation_loss(fg * s[0], ft * s[1], fb * s[2]) - base).item()))

    worst_grad = 0.0
    for _ in range(20):
        x = torch.randn(3, 2, 6, generator=gen)
        xr = x.clone().requires_grad_(True)
        separation_loss(xr[0], xr[1], xr[2]).backward()
        fd = central_fd_grad(lambda t: separation_loss(t[0], t[1], t[2]), x)
        worst_grad = max(worst_grad, rel_err(xr.grad, fd))

    ok = err_cases <= 1e-9 and err_scale <= 1e-6 and worst_grad < 1e-4
    verdict(1, ok, f"cases={cases} (err {err_cases:.1e} <= 1e-9), scale err {err_scale:.1e} <= 1e-6, "
                   f"grad rel err {worst_grad:.1e} < 1e-4")


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_02_center_focus(verdict):
    gen = torch.Generator().manual_seed(2)
    worst_sum, outside_same, worst_uniform = 0.0, True, 0.0
    for h, w, size in [(8, 4, 2), (7, 5, 3), (6, 6, 1), (8, 4, 4)]:
        cfm = CenterFocus(16, size, seed=h * w)
        x = torch.randn(3, 16, h, w, generator=gen)
        with torch.no_grad():
            p = cfm.probabilities(x)
            worst_sum = max(worst_sum, (p.sum(dim=(1, 2)) - 1).abs().max().item())
            base = cfm(x)
            mask = torch.ones(h, w, dtype=torch.bool)
            rows, cols = center_window(h, w, size)
            mask[rows, cols] = False
            y = x.clone()
            y[:, :, mask] += torch.randn(3, 16, int(mask.sum()), generator=gen) * 5
            outside_same &= torch.equal(cfm(y), base)
            cfm.score.weight.zero_()
            cfm.score.bias.fill_(0.7)
            mean = x[:, :, rows, cols].mean(dim=(2, 3))
            worst_uniform = max(worst_uniform, (cfm(x) - mean).abs().max().item())
    ok = worst_sum <= 1e-6 and outside_same and worst_uniform <= 1e-6
    verdict(2, ok, f"prob sum err {worst_sum:.1e} <= 1e-6, outside-window bit-unchanged={outside_same}, "
                   f"uniform-logit err {worst_uniform:.1e} <= 1e-6")


# -- 3 ----------------------------------------------------------------------------------

def test_criterion_03_grouped_converter(verdict):
    gen = torch.Generator().manual_seed(3)
    cin, cout, groups = 16, 8, 4
    cm = Converter(cin, cout, groups, seed=5)
    x = torch.randn(2, cin, 4, 3, generator=gen)
    exact = True
    with torch.no_grad():
        base = cm(x)
        for i in range(cin):
            y = x.clone()
            y[:, i] += torch.randn(2, 4, 3, generator=gen)
            changed = (cm(y) != base).any(dim=0)
            grp = i // (cin // groups)
            expected = torch.zeros(cout, dtype=torch.bool)
            expected[grp * (cout // groups):(grp + 1) * (cout // groups)] = True
            exact &= torch.equal(changed, expected)

        dense = Converter(cin, cout, 1, seed=6)
        w = dense.conv.weight[:, :, 0, 0]
        oracle = torch.einsum("oc,bchw->bohw", w, x).mean(dim=(2, 3)) + dense.conv.bias
        err = (dense(x) - oracle).abs().max().item()
    verdict(3, exact and err <= 1e-6,
            f"group isolation exact={exact}, G=1 vs dense oracle err {err:.1e} <= 1e-6")


# -- 4 ----------------------------------------------------------------------------------

def test_criterion_04_ram(verdict, float64):
    gen = torch.Generator().manual_seed(4)
    ram = RelationAdaptive(32, 8, seed=1)
    x = torch.randn(1000, 32, generator=gen) * 3
    with torch.no_grad():
        wts = ram(x)
        in_range = bool(((wts > 0) & (wts < 1)).all())
        norms_ok = bool((correct(x, wts).norm(dim=1) <= x.norm(dim=1)).all())
        zero = RelationAdaptive(32, 8)
        for p in zero.parameters():
            p.zero_()
        half = bool((zero(x) == 0.5).all())

    worst = 0.0
    for _ in range(5):
        r = RelationAdaptive(12, 6, seed=int(torch.randint(0, 1000, (1,), generator=gen)))
        with torch.no_grad():
            for p in r.parameters():
                p.normal_(0.0, 0.5, generator=gen)
        c = torch.randn(3, 12, generator=gen)
        target = torch.randn(3, 12, generator=gen)

        def loss(t):
            return ((correct(t, r(t)) - target) ** 2).sum()

        cr = c.clone().requires_grad_(True)
        loss(cr).backward()
        worst = max(worst, rel_err(cr.grad, central_fd_grad(loss, c)))
        # parameter gradient of one layer as well
        r.zero_grad()
        loss(c).backward()
        w0 = r.fc1.weight.detach().clone()

        def loss_w(w):
            with torch.no_grad():
                r.fc1.weight.copy_(w)
            return loss(c)

        fd = central_fd_grad(loss_w, w0)
        with torch.no_grad():
            r.fc1.weight.copy_(w0)
        worst = max(worst, rel_err(r.fc1.weight.grad, fd))
    ok = in_range and norms_ok and half and worst < 1e-4
    verdict(4, ok, f"F_w in (0,1)={in_range}, norm shrink on 1000 inputs={norms_ok}, "
                   f"zero params -> 0.5 exactly={half}, grad rel err {worst:.1e} < 1e-4")


# -- 5 ----------------------------------------------------------------------------------

def test_criterion_05_loss_aggregation(verdict):
    agg = aggregate([1.0, 1.0, 1.0, 1.0], LossWeights())
    err = abs(agg - 1.8)
    rng = np.random.default_rng(5)
    linear = True
    for _ in range(100):
        l_id, l_tri, l_sl = rng.uniform(0, 5, 3)
        gamma = torch.tensor(float(rng.uniform(0, 3)), dtype=torch.float64, requires_grad=True)
        t = total_loss(torch.tensor(l_id, dtype=torch.float64), torch.tensor(l_tri, dtype=torch.float64),
                       torch.tensor(l_sl, dtype=torch.float64), gamma)
        t.backward()
        linear &= gamma.grad.item() == l_sl
        linear &= t.item() == (l_id + l_tri) + gamma.item() * l_sl
    verdict(5, err <= 1e-12 and linear, f"unit losses -> {agg!r} (err {err:.1e} <= 1e-12), "
                                         f"linear in gamma exactly={linear}")


# -- 6 ----------------------------------------------------------------------------------

def _eval_instance(rng):
    nq, ng = 50, 200
    if rng.random() < 0.5:
        dist = rng.integers(1, 20, (nq, ng)).astype(float) / 4  # many ties
    else:
        dist = rng.uniform(0.5, 2.0, (nq, ng))
    return (dist, rng.integers(0, 30, nq), rng.integers(0, 4, nq),
            rng.integers(0, 30, ng), rng.integers(0, 4, ng))


@pytest.mark.parametrize("use_numba", [True, False], ids=["numba", "numpy"])
def test_criterion_06_evaluator(verdict, monkeypatch, use_numba):
    monkeypatch.setattr(kernels, "USE_NUMBA", use_numba and kernels.numba is not None)
    rng = np.random.default_rng(6)
    mismatches, cube_bad = 0, 0
    for _ in range(100):
        dist, qi, qc, gi, gc = _eval_instance(rng)
        res = cmc_map(dist, qi, qc, gi, gc)
        cmc, mAP, aps, skipped = brute_force_eval(dist.tolist(), qi.tolist(), qc.tolist(),
                                                  gi.tolist(), gc.tolist())
        same = (res.cmc.tolist() == cmc and res.mAP == mAP and res.ap[res.valid].tolist() == aps
                and res.num_skipped == skipped)
        mismatches += not same
        cube_bad += cmc_map(dist ** 3, qi, qc, gi, gc).mAP != res.mAP
    path = "numba" if kernels.USE_NUMBA else "numpy"
    verdict(6, mismatches == 0 and cube_bad == 0,
            f"[{path}] 100 instances 50x200: {mismatches} oracle mismatches (exact), "
            f"{cube_bad} mAP changes under x^3")


# -- 7 ----------------------------------------------------------------------------------

def test_criterion_07_fused_distance(verdict):
    rng = np.random.default_rng(7)

    def rec():
        return GalleryRecord(rng.normal(size=16) * rng.uniform(0.1, 10), rng.normal(size=8), 0, 0)

    fails = {"symmetry": 0, "identity": 0, "triangle": 0, "alpha monotone": 0}
    for _ in range(1000):
        a, b, c = rec(), rec(), rec()
        alpha = rng.uniform(0, 3)
        fails["symmetry"] += fused_distance(a, b, alpha) != fused_distance(b, a, alpha)
        fails["identity"] += fused_distance(a, a, alpha) != 0.0
        fails["triangle"] += (fused_distance(a, c, alpha)
                              > fused_distance(a, b, alpha) + fused_distance(b, c, alpha) + 1e-9)
        fails["alpha monotone"] += fused_distance(a, b, alpha) > fused_distance(a, b, alpha + rng.uniform(0, 2))
    verdict(7, not any(fails.values()), "violations over 1000 draws: " +
            ", ".join(f"{k}={v}" for k, v in fails.items()))


# -- 8 ----------------------------------------------------------------------------------

SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def desk_dataset(tmp_path_factory):
    cfg = RunConfig()  # desk defaults: 20 ids x 40 images, 30% occluded
    root = tmp_path_factory.mktemp("desk")
    index, _ = generate_synthetic(SyntheticConfig.from_run_config(cfg), root)
    size = (cfg.image_height, cfg.image_width)
    return cfg, root, index, {s: load_split(index, s, size) for s in ("train", "query", "gallery")}


@pytest.mark.slow
def test_criterion_08_occlusion_experiment(verdict, desk_dataset, tmp_path):
    import time

    cfg, root, index, split = desk_dataset
    t0 = time.perf_counter()
    r1, cos = {}, {}
    for seed in SEEDS:
        for name, leg in (("baseline", cfg.replace(seed=seed, use_concat=False, use_cfm=False,
                                                    use_sl=False, use_ram=False)),
                          ("full", cfg.replace(seed=seed)),
                          ("gamma0", cfg.replace(seed=seed, gamma=0.0))):
            model = train(leg, train_data=split["train"]).model
            if name != "gamma0":
                r1[name, seed] = evaluate(model, split["query"], split["gallery"])["report"]["occluded.rank1"]
            if name != "baseline":
                cos[name, seed] = feature_cosines(model, split["train"])
    minutes = (time.perf_counter() - t0) / 60

    wins = sum(r1["full", s] >= r1["baseline", s] for s in SEEDS)
    mean = {k: np.mean([cos[k, s] for s in SEEDS], axis=0) for k in ("full", "gamma0")}
    sl_ok = bool(mean["full"][0] < mean["gamma0"][0] and mean["full"][1] < mean["gamma0"][1])
    ok = wins >= 2 and sl_ok and minutes <= 15
    detail = (f"(a) occluded R1 full vs baseline per seed "
              + ", ".join(f"{r1['full', s]:.3f}/{r1['baseline', s]:.3f}" for s in SEEDS)
              + f" -> {wins}/3 >=; (b) mean cos(g,t), cos(g,b) gamma=1 "
              f"{mean['full'][0]:.3f}, {mean['full'][1]:.3f} vs gamma=0 "
              f"{mean['gamma0'][0]:.3f}, {mean['gamma0'][1]:.3f}; {minutes:.1f} min <= 15")
    verdict(8, ok, detail)


# -- 9 ----------------------------------------------------------------------------------

def test_criterion_09_determinism(verdict, tmp_path):
    cfg = RunConfig(data_root=str(tmp_path / "data"), out_dir=str(tmp_path / "out"), steps=50,
                    warmup_steps=5, decay_steps=[40])
    path = tmp_path / "run.txt"
    config_mod.save(cfg, path)
    assert main(["gen-data", "--config", str(path), "--seed", "11"]) == 0
    h1 = file_hashes(tmp_path / "data")
    assert main(["gen-data", "--config", str(path), "--seed", "11"]) == 0
    h2 = file_hashes(tmp_path / "data")

    finals = []
    for _ in range(2):
        assert main(["train", "--config", str(path), "--seed", "3"]) == 0
        last = (tmp_path / "out" / "loss_log.tsv").read_text().splitlines()[-1]
        finals.append(float(last.split("\t")[-1]))
    diff = abs(finals[0] - finals[1])
    verdict(9, h1 == h2 and diff <= 1e-6,
            f"gen-data hashes identical over {len(h1)} files={h1 == h2}, "
            f"final L_total {finals[0]:.6f} vs {finals[1]:.6f} (diff {diff:.1e} <= 1e-6)")


# -- 10 ---------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_ablation(verdict, desk_dataset, tmp_path):
    cfg, root, index, split = desk_dataset
    cfg = cfg.replace(data_root=str(root), out_dir=str(tmp_path / "ablate"))
    path = tmp_path / "run.txt"
    config_mod.save(cfg, path)
    code = main(["ablate", "--config", str(path)])
    lines = (tmp_path / "ablate" / "ablation.tsv").read_text().splitlines()
    header, rows = lines[0].split("\t"), [l.split("\t") for l in lines[1:]]
    shaped = header == list(ABLATION_COLUMNS) and len(rows) == 6 and all(r[5] == "ok" for r in rows)
    numeric = all(not math.isnan(float(v)) for r in rows for v in r[6:])

    # ram-off leg (+CFM has RAM disabled): exported F_final must be the plain concatenation
    from ocnet.checkpoint import load_model

    model = load_model(tmp_path / "ablate" / "plus_CFM" / "checkpoint.ocn")
    x = torch.from_numpy(np.stack([im for im in split["query"].images[:8]]))
    with torch.no_grad():
        out = model(x)
    equal = model.ram is None and torch.equal(out.f_final, out.concat)
    verdict(10, code == 0 and shaped and numeric and equal,
            f"exit {code}, 6 rows {[r[0] for r in rows]} with columns {len(header)}, "
            f"ram-off F_final == F_concat exactly={equal}")


# -- supplementary: training descent ---------------------------------------------------

def test_training_descent_over_50_steps(desk_dataset):
    cfg, _, _, split = desk_dataset
    first, last = [], []
    for seed in SEEDS:
        h = train(cfg.replace(seed=seed, steps=50, warmup_steps=5, decay_steps=[]),
                  train_data=split["train"]).history
        first.append(h[0]["L_total"])
        last.append(h[-1]["L_total"])
    assert np.mean(last) < np.mean(first)
