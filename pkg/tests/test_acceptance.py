"""Acceptance criteria 1-12; each test records one PASS/FAIL line shown in the terminal summary."""

import dataclasses
import json
import math
import time

import numpy as np
import pytest
import torch

from scatgen import evaluation as ev
from scatgen import preprocess as pp
from scatgen import storage
from scatgen.cli import main
from scatgen.model import ModelConfig, ScattererNet
from scatgen.preprocess import ScattererGrid, VRParams
from scatgen.scene import (
    Box, BoxArray, SceneConfig, build_scene, oracle_scatterers, scene_geometry, specular_points, step_scene,
)
from scatgen.training import (
    ArrayData, Split, TrainConfig, all_zero_metrics, few_shot_transfer, nmse_loss, predict, run_ablation,
    scratch_few_shot, split_metrics, train,
)

SOURCE = "Crossroad_28GHz_HighVTD"
TARGET = "Crossroad_sub6GHz_HighVTD"
FEW_SHOT_EPOCHS = 100


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def desk_run(workdir):
    """Criterion-8 pipeline through the CLI: generate 600 samples, train with the 4:1:1 split."""
    t0 = time.perf_counter()
    assert main(["generate", "--condition", SOURCE, "--out", str(workdir / "source")]) == 0
    t_gen = time.perf_counter() - t0
    assert main(["train", "--data", str(workdir / "source"), "--out", str(workdir / "train")]) == 0
    return {"seconds": time.perf_counter() - t0, "generate_seconds": t_gen,
            "data": workdir / "source", "run": workdir / "train"}


@pytest.fixture(scope="module")
def desk_arrays(desk_run):
    manifest, data, _ = storage.load_arrays(desk_run["data"])
    ckman = storage.load_json(desk_run["run"] / "checkpoint" / "manifest.json")
    return manifest, data, Split.from_dict(ckman["split"])


# ---------------------------------------------------------------------- 1

def _brute_cell(v, lo, hi, n):
    w = (hi - lo) / n
    for i in range(n):
        if lo + i * w <= v < lo + (i + 1) * w or (i == n - 1 and v == hi):
            return i
    return -1


@pytest.mark.criterion(1, "geometry oracle equivalence")
def test_criterion_01_geometry_oracles(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    n = 10_000
    pc = np.column_stack([rng.uniform(-40, 40, n), rng.uniform(-40, 40, n), rng.uniform(0, 12, n)])
    pc[::9, 2] = 0.3
    tx, rx = np.array([-7.0, 2.0, 1.6]), np.array([19.0, -5.0, 1.6])

    two_a = math.sqrt(2) * math.dist(tx, rx)
    vr_ok = np.array_equal(pp.vr_filter(pc, VRParams.from_transceivers(tx, rx)),
                           pc[np.array([math.dist(p, tx) + math.dist(p, rx) <= two_a for p in pc])])
    ground_ok = np.array_equal(pp.remove_ground(pc, 0.3), np.array([p for p in pc if p[2] >= 0.3]))

    m_x, m_y = 16, 12
    fg = pp.extract_features(pc, tx, rx, m_x, m_y)
    x_min, x_max, y_min, y_max = pc[:, 0].min(), pc[:, 0].max(), pc[:, 1].min(), pc[:, 1].max()
    xg, yg = (x_max - x_min) / m_x, (y_max - y_min) / m_y
    ref = np.zeros((3, m_x, m_y))
    for p in pc:
        i, j = _brute_cell(p[0], x_min, x_max, m_x), _brute_cell(p[1], y_min, y_max, m_y)
        ref[0, i, j] += 1.0 / (xg * yg)
        ref[1, i, j] = max(ref[1, i, j], p[2])
    for i in range(m_x):
        for j in range(m_y):
            c = np.array([x_min + (i + 0.5) * xg, y_min + (j + 0.5) * yg, 0.0])
            ref[2, i, j] = 0.5 * (np.linalg.norm(c - tx) + np.linalg.norm(c - rx))
    feat_err = float(np.max(np.abs(fg.data - ref)))

    bounds = (-25.0, 31.0, -12.0, 17.0)
    pts = np.column_stack([rng.uniform(-35, 40, n), rng.uniform(-20, 25, n), np.ones(n)])
    g = pp.scatterer_grid(pts, bounds, 10, 10)
    counts, dropped = np.zeros((10, 10)), 0
    for p in pts:
        i, j = _brute_cell(p[0], bounds[0], bounds[1], 10), _brute_cell(p[1], bounds[2], bounds[3], 10)
        if i < 0 or j < 0:
            dropped += 1
        else:
            counts[i, j] += 1
    grid_err = float(np.max(np.abs(g.density - counts / g.cell_area)))
    secs = time.perf_counter() - t0

    ok = vr_ok and ground_ok and feat_err <= 1e-6 and grid_err <= 1e-6 and g.dropped == dropped and secs < 30
    record(ok, f"vr={vr_ok} ground={ground_ok} feature_err={feat_err:.1e} grid_err={grid_err:.1e} "
               f"n={n} in {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------- 2

def _angle_gap(p, tx, rx, n):
    a = math.acos(np.clip(np.dot(tx - p, n) / np.linalg.norm(tx - p), -1, 1))
    b = math.acos(np.clip(np.dot(rx - p, n) / np.linalg.norm(rx - p), -1, 1))
    return abs(a - b)


@pytest.mark.criterion(2, "reflection law")
def test_criterion_02_reflection_law(record):
    wall = Box((10.5, 0.0, 0.0), (0.5, 50.0, 500.0), 0.0, "building")
    tx, rx = np.array([4.0, -8.0, 1.6]), np.array([4.0, 8.0, 1.6])
    mid, _, _ = specular_points(tx, rx, BoxArray([wall]), l_max=1e9)
    mid_err = float(np.max(np.abs(mid[0] - [10.0, 0.0, 1.6])))

    rng = np.random.default_rng(202)
    scenes = [build_scene(SceneConfig(t, v, snapshot_count=60, seed=s))
              for t, v, s in (("crossroad", "high", 11), ("crossroad", "low", 12), ("wide_lane", "high", 13),
                              ("forking_road", "high", 14))]
    worst, n_pts, subset_ok = 0.0, 0, True
    for _ in range(100):
        sc = scenes[rng.integers(len(scenes))]
        snap = step_scene(sc, int(rng.integers(60)), int(rng.integers(len(sc.links))))
        hi, lo = oracle_scatterers(snap, sc, 28e9), oracle_scatterers(snap, sc, 5.9e9)
        lo_set = {tuple(p) for p in lo.points}
        subset_ok &= all(tuple(p) in lo_set for p in hi.points)
        normals = scene_geometry(sc, snap).face_frames()[0]
        for p, (_, f) in zip(lo.points, lo.faces):
            worst = max(worst, _angle_gap(p, snap.tx_pose, snap.rx_pose, normals[f]))
            n_pts += 1
    ok = worst < 1e-9 and mid_err < 1e-6 and subset_ok and n_pts > 0
    record(ok, f"max angle gap {worst:.1e} rad over {n_pts} scatterers, midpoint err {mid_err:.1e} m, "
               f"28GHz subset of 5.9GHz on 100 snapshots: {subset_ok}")
    assert ok


# ---------------------------------------------------------------------- 3

@pytest.mark.criterion(3, "patch arithmetic")
def test_criterion_03_patch_arithmetic(record):
    cfg = ModelConfig()
    out = ScattererNet(cfg)(torch.rand(2, 3, 80, 80), torch.tensor([28e9, 5.9e9]))
    rejected = 0
    for kw in (dict(m_x=84), dict(patch=16), dict(n_x=8), dict(m_y=72)):
        try:
            ModelConfig(**kw)
        except ValueError:
            rejected += 1
    ok = cfg.n_tokens == 100 and tuple(out.shape[1:]) == (10, 10) and rejected == 4
    record(ok, f"N={cfg.n_tokens}, output {tuple(out.shape[1:])}, {rejected}/4 mismatched configs rejected")
    assert ok


# ---------------------------------------------------------------------- 4

@pytest.mark.criterion(4, "zero-init LoRA identity")
def test_criterion_04_lora_identity(record):
    m = ScattererNet(ModelConfig(depth=2))
    x, f = torch.rand(4, 3, 80, 80), torch.tensor([28e9, 5.9e9, 28e9, 5.9e9])
    a = m(x, f)
    with m.adapters_disabled():
        b = m(x, f)
    identical = torch.equal(a, b)
    digest = m.backbone_digest()
    adapters = {n: p.detach().clone() for n, p in m.adapters.named_parameters() if p.requires_grad}
    rng = np.random.default_rng(4)
    tgt = np.zeros((8, 10, 10), np.float32)
    tgt.reshape(8, -1)[np.arange(8), rng.integers(0, 100, 8)] = 1.0
    data = ArrayData(rng.random((8, 3, 80, 80)), tgt, np.full(8, 28e9))
    res = train(m, data, Split(np.arange(8), np.array([], int), np.array([], int)),
                TrainConfig(batch_size=8, epochs=10, decay_every=10**9))
    changed = sum(not torch.equal(p, adapters[n]) for n, p in m.adapters.named_parameters() if n in adapters)
    ok = identical and res.steps == 10 and m.backbone_digest() == digest and changed > 0
    record(ok, f"bit-equal forward={identical}, {res.steps} steps, digest unchanged={m.backbone_digest() == digest}, "
               f"{changed}/{len(adapters)} adapter tensors changed")
    assert ok


# ---------------------------------------------------------------------- 5

@pytest.mark.criterion(5, "gradient check")
def test_criterion_05_gradient_check(record):
    t0 = time.perf_counter()
    torch.manual_seed(5)
    cfg = ModelConfig(m_x=8, m_y=8, patch=2, n_x=4, n_y=4, dim=8, depth=1, heads=2)
    m = ScattererNet(cfg).double()
    params = [p for p in m.parameters() if p.requires_grad]
    with torch.no_grad():  # move off the zero-init point so every adapter gradient is live
        for p in params:
            p.add_(0.3 * torch.randn_like(p))
    x = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    f = torch.tensor([5.9e9, 28e9, 3.5e9], dtype=torch.float64)
    y = torch.rand(3, 4, 4, dtype=torch.float64)

    def loss():
        return nmse_loss(m(x, f), y)

    m.zero_grad()
    loss().backward()
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(55)
    worst, h = 0.0, 1e-6
    for _ in range(100):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        i = int(rng.integers(params[k].numel()))
        flat = params[k].data.view(-1)
        analytic = float(params[k].grad.view(-1)[i])
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + h
            up = float(loss())
            flat[i] = orig - h
            down = float(loss())
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 120
    record(ok, f"max relative error {worst:.2e} over 100 probed parameters in {secs:.1f}s")
    assert ok


# ---------------------------------------------------------------------- 6

@pytest.mark.criterion(6, "loss and metric algebra")
def test_criterion_06_algebra(record):
    t = torch.tensor([3.0, 4.0], dtype=torch.float64)
    examples = [
        float(nmse_loss(t, t)) == 0.0,
        float(nmse_loss(torch.zeros(2, dtype=torch.float64), t)) == 1.0,
        float(nmse_loss(torch.tensor([3.0, 0.0], dtype=torch.float64), t)) == 16 / 25,
        ev.p_pos(np.zeros((10, 10)), np.zeros((10, 10))) == 1.0,
        ev.p_num(np.array([2.9]), np.array([2.0])) == 1.0,
        ev.p_num(np.array([3.1]), np.array([2.0])) == 0.0,
    ]
    truth = np.zeros((10, 10))
    truth[1:4, 1:4] = 1.0
    pred = truth.copy()
    pred.flat[[0, 11, 12, 55, 66, 77, 99]] = np.where(truth.flat[[0, 11, 12, 55, 66, 77, 99]] > 0, 0.0, 1.0)
    examples += [ev.p_pos(pred, truth) == 0.93, ev.p_pos((truth == 0).astype(float), truth) == 0.0]
    try:
        nmse_loss(t, torch.zeros(2, dtype=torch.float64))
        examples.append(False)
    except ValueError as exc:
        examples.append("undefined normalization" in str(exc))

    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(1000):
        tr = np.where(rng.random((10, 10)) < 0.3, rng.random((10, 10)), 0.0)
        pr = np.where(rng.random((10, 10)) < 0.3, rng.random((10, 10)), 0.0)
        pr.flat[::7] = tr.flat[::7] * rng.uniform(0.3, 1.7)
        agree = sum((a < 1e-3) == (b < 1e-3) for a, b in zip(pr.flat, tr.flat)) / 100
        occ = [(a, b) for a, b in zip(pr.flat, tr.flat) if b >= 1e-3]
        mismatches += ev.p_pos(pr, tr) != agree
        if occ:
            mismatches += ev.p_num(pr, tr) != sum(abs(b - a) / b < 0.5 for a, b in occ) / len(occ)
            sq = sum((a - b) ** 2 for a, b in zip(pr.flat, tr.flat))
            den = sum(b * b for b in tr.flat)
            mismatches += abs(float(nmse_loss(torch.as_tensor(pr), torch.as_tensor(tr))) - sq / den) > 1e-12
            mismatches += abs(ev.nmse(pr, tr) - sq / den) > 1e-12
    ok = all(examples) and mismatches == 0
    record(ok, f"{sum(examples)}/{len(examples)} hand examples exact, {mismatches} mismatches vs brute loops on 1000 pairs")
    assert ok


# ---------------------------------------------------------------------- 7

@pytest.mark.criterion(7, "overfit capacity")
def test_criterion_07_overfit(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    feats = rng.random((8, 3, 80, 80)).astype(np.float32) * np.array([20, 10, 50], np.float32)[None, :, None, None]
    tgt = np.zeros((8, 10, 10), np.float32)
    for i in range(8):
        tgt[i].flat[rng.choice(100, 3, replace=False)] = rng.choice([0.25, 0.5, 1.0], 3)
    data = ArrayData(feats, tgt, np.where(np.arange(8) % 2, 28e9, 5.9e9))
    m = ScattererNet(ModelConfig(dim=64, depth=2))
    fit_split = Split(np.arange(8), np.array([], int), np.array([], int))
    start = float(nmse_loss(torch.as_tensor(predict(m, data, np.arange(8))), torch.as_tensor(tgt)))
    res = train(m, data, fit_split, TrainConfig(batch_size=8, epochs=2000, decay_every=10**9))
    final = float(nmse_loss(torch.as_tensor(predict(m, data, np.arange(8))), torch.as_tensor(tgt)))
    secs = time.perf_counter() - t0
    ok = res.steps == 2000 and final < 0.01 and final < start and secs < 300
    record(ok, f"train NMSE {start:.3f} -> {final:.2e} after {res.steps} steps in {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------------- 8

@pytest.mark.criterion(8, "desk-scale end-to-end")
def test_criterion_08_end_to_end(record, desk_run, desk_arrays):
    manifest, data, split = desk_arrays
    report = storage.load_json(desk_run["run"] / "report.json")
    s = report["summary"]
    zero = all_zero_metrics(data, split.test)
    margin = s["p_pos"] - zero["p_pos"]
    ref = report["published_reference"]
    sizes = (len(split.train), len(split.val), len(split.test))
    checks = {
        "margin>=10pp": margin >= 0.10,
        "p_num>0": (s["p_num"] or 0.0) > 0.0 and zero["p_num"] == 0.0,
        "reference": (ref["p_pos"], ref["p_num"]) == (0.941, 0.918),
        "split": sizes == (400, 100, 100) and manifest["sample_count"] == 600,
        "runtime": desk_run["seconds"] < 1800,
    }
    ok = all(checks.values())
    record(ok, f"test P_pos {s['p_pos']:.4f} vs all-zero {zero['p_pos']:.4f} (margin {100 * margin:+.2f} pp), "
               f"P_num {s['p_num']:.3f} vs 0, occupied cells {100 * manifest['occupied_cell_fraction']:.2f}%, "
               f"{desk_run['seconds']:.0f}s; failed: {[k for k, v in checks.items() if not v]}")
    assert ok


# ---------------------------------------------------------------------- 9

@pytest.mark.criterion(9, "few-shot transfer")
def test_criterion_09_few_shot(record, desk_run, workdir):
    t0 = time.perf_counter()
    assert main(["generate", "--condition", TARGET, "--out", str(workdir / "target")]) == 0
    source, cman = storage.load_checkpoint(desk_run["run"] / "checkpoint")
    tman, target, _ = storage.load_arrays(workdir / "target")
    split = Split.from_dict(cman["split"])  # same 600-sample indexing and seed as the source run
    cfg = TrainConfig(epochs=FEW_SHOT_EPOCHS)
    seeds = [0, 1, 2]
    fine = few_shot_transfer(source.state_dict(), source.cfg, target, split, [50], seeds, cfg)
    scratch = [scratch_few_shot(source.cfg, target, split, 50, s, cfg) for s in seeds]
    med_fine = float(np.median([r["nmse"] for r in fine]))
    med_scratch = float(np.median([r["nmse"] for r in scratch]))
    secs = time.perf_counter() - t0
    ok = med_fine < med_scratch and secs < 1200
    record(ok, f"median test NMSE fine-tuned {med_fine:.4f} vs scratch {med_scratch:.4f} "
               f"(k=50, seeds {seeds}), {secs:.0f}s")
    assert ok


# ---------------------------------------------------------------------- 10

@pytest.mark.criterion(10, "ablation ordering")
def test_criterion_10_ablation(record, desk_run, desk_arrays):
    _, data, split = desk_arrays
    cman = storage.load_json(desk_run["run"] / "checkpoint" / "manifest.json")
    # the criterion-8 run is exactly the seed-0 "full" ablation run; reuse it instead of retraining
    assert cman["train_config"] == TrainConfig(seed=0).to_dict()
    assert cman["model_config"] == ModelConfig(seed=0).to_dict()
    p = {"full": [storage.load_json(desk_run["run"] / "report.json")["summary"]["p_pos"]],
         "no_patching": [], "no_positional": []}
    for v in p:
        for s in (0, 1, 2)[len(p[v]):]:
            p[v].append(run_ablation(v, data, split, ModelConfig(seed=s), TrainConfig(seed=s))["p_pos"])
    med = {k: float(np.median(v)) for k, v in p.items()}
    ok = med["full"] >= med["no_patching"] and med["full"] >= med["no_positional"]
    record(ok, "median test P_pos " + ", ".join(f"{k} {v:.4f}" for k, v in med.items())
           + f" (desk protocol, {TrainConfig().epochs} epochs, seeds 0-2)")
    assert ok


# ---------------------------------------------------------------------- 11

@pytest.mark.criterion(11, "TACF")
def test_criterion_11_tacf(record):
    rng = np.random.default_rng(11)
    t = np.arange(40)[:, None] * 0.1
    pairs = list(zip(np.array([0.0, 0.0, 1.6]) + t * [12.0, 0.0, 0.0],
                     np.array([40.0, 3.0, 1.6]) + t * [-9.0, 0.0, 0.0]))
    pts = np.column_stack([rng.uniform(-20, 60, 25), rng.uniform(5, 25, 25), rng.uniform(0, 15, 25)])
    cfg = ev.TacfConfig(28e9, tuple(np.arange(0, 21) * 0.1))
    zero_lag = ev.tacf(pts, pairs, cfg)[0] == 1.0

    static = [(np.array([0.0, 0.0, 1.6]), np.array([40.0, 3.0, 1.6]))] * 40
    static_err = float(np.max(np.abs(ev.tacf(pts, static, cfg) - 1.0)))

    v, n = 15.0, 60
    s = np.array([[200.0, 0.0, 1.6]])
    rx = np.array([200.0, 40.0, 1.6])
    line = [(np.array([v * i * 0.1, 0.0, 1.6]), rx) for i in range(n)]
    d = 240.0 - v * 0.1 * np.arange(n)
    curve = ev.tacf(s, line, ev.TacfConfig(28e9, tuple(np.arange(0, 31) * 0.1)))
    doppler_err = max(abs(curve[k] - np.sum(1 / (d[:n - k] * d[k:]))
                          / math.sqrt(np.sum(d[:n - k] ** -2.0) * np.sum(d[k:] ** -2.0))) for k in range(31))

    grid = ScattererGrid(np.where(rng.random((10, 10)) < 0.2, 0.125, 0.0), (0.0, 40.0, -10.0, 10.0))
    same = ev.compare_tacf(grid, ev.scatterers_from_grid(grid, seed=2), pairs, cfg, seed=2)["max_abs_gap"]
    ok = zero_lag and static_err < 1e-12 and doppler_err < 1e-9 and same < 1e-12
    record(ok, f"TACF(0)==1: {zero_lag}, static max err {static_err:.1e}, Doppler closed-form err {doppler_err:.1e}, "
               f"identical-set gap {same:.1e}")
    assert ok


# ---------------------------------------------------------------------- 12

def _small_pipeline(root):
    root.mkdir(parents=True, exist_ok=True)
    gen = dict(condition=SOURCE, sample_count=12, m_x=16, m_y=16, n_x=2, n_y=2, snapshot_count=3)
    (root / "cfg.json").write_text(json.dumps({"generation": gen, "model": {"dim": 8, "depth": 1, "heads": 2},
                                               "train": {"batch_size": 4, "epochs": 3}}))
    c = str(root / "cfg.json")
    codes = [main(["generate", "--config", c, "--out", str(root / "d")]),
             main(["train", "--config", c, "--data", str(root / "d"), "--out", str(root / "t")]),
             main(["evaluate", "--config", c, "--checkpoint", str(root / "t" / "checkpoint"),
                   "--data", str(root / "d"), "--out", str(root / "e")])]
    return codes, (storage.load_json(root / "t" / "report.json")["summary"],
                   storage.load_json(root / "e" / "report.json")["summary"],
                   storage.load_json(root / "t" / "checkpoint" / "manifest.json")["state_digest"])


@pytest.mark.criterion(12, "persistence")
def test_criterion_12_persistence(record, desk_run, workdir):
    # dataset round trip: read -> write -> read is bit-identical
    man, records = storage.read_dataset(desk_run["data"])
    records = list(records)
    storage.write_dataset(records, man, workdir / "copy")
    _, again = storage.read_dataset(workdir / "copy")
    data_ok = all(a.features.tobytes() == b.features.tobytes() and a.target_raw.tobytes() == b.target_raw.tobytes()
                  and a.target_norm.tobytes() == b.target_norm.tobytes() for a, b in zip(records, again))
    # checkpoint round trip
    model, cman = storage.load_checkpoint(desk_run["run"] / "checkpoint")
    storage.save_checkpoint(model, workdir / "ckpt_copy", extra={"condition_key": cman["condition_key"]})
    model2, cman2 = storage.load_checkpoint(workdir / "ckpt_copy")
    ckpt_ok = cman2["state_digest"] == cman["state_digest"] and all(
        a.numpy().tobytes() == b.numpy().tobytes() for a, b in zip(model.state_dict().values(), model2.state_dict().values()))

    codes = {}
    blob = (workdir / "copy" / "samples" / "000000.target.ssg")
    raw = blob.read_bytes()
    cases = {storage.BAD_MAGIC: b"SSG0" + raw[4:], storage.TRUNCATED: raw[:-4], storage.DIM_MISMATCH: raw + raw[-4:]}
    for want, buf in cases.items():
        blob.write_bytes(buf)
        try:
            storage.read_dataset(workdir / "copy")
            codes[want] = None
        except storage.StorageError as exc:
            codes[want] = exc.code
    blob.write_bytes(raw)
    (workdir / "copy" / "samples" / "000599.json").unlink()
    try:
        storage.read_dataset(workdir / "copy")
        codes[storage.COUNT_MISMATCH] = None
    except storage.StorageError as exc:
        codes[storage.COUNT_MISMATCH] = exc.code
    p = workdir / "ckpt_copy" / "params" / cman2["params"]["blocks.0.attn_key.weight"]["file"]
    arr = storage.read_blob(p)
    arr.flat[0] += 0.5
    storage.write_blob(p, arr)
    try:
        storage.load_checkpoint(workdir / "ckpt_copy")
        codes[storage.DIGEST_MISMATCH] = None
    except storage.StorageError as exc:
        codes[storage.DIGEST_MISMATCH] = exc.code
    codes_ok = all(k == v for k, v in codes.items())

    c1, r1 = _small_pipeline(workdir / "rerun_a")
    c2, r2 = _small_pipeline(workdir / "rerun_b")
    rerun_ok = c1 == c2 == [0, 0, 0] and r1 == r2 and r1[0] == r1[1]
    ok = data_ok and ckpt_ok and codes_ok and rerun_ok
    record(ok, f"dataset bit-exact={data_ok}, checkpoint bit-exact={ckpt_ok}, error codes {codes}, "
               f"generate/train/evaluate reruns identical={rerun_ok}")
    assert ok
