"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import math
import subprocess
import sys
import textwrap
import time
import warnings

import numpy as np
import torch

import oracles
from conftest import ACCEPTANCE_LINES, TINY, randomize_
from fixtures import five_query_fixture
from test_ctpl import unrolled
from actprompt.aci import consistency_loss
from actprompt.config import TemporalConfig, TrainConfig
from actprompt.ctpl import TemporalPromptLearner
from actprompt.data import (Dataset, FeatureBundle, SyntheticSpec, feature_bytes, generate_synthetic,
                            parse_features)
from actprompt.encoders import ImageEncoder, PromptPack
from actprompt.metrics import GroundingPrediction, evaluate_retrieval, query_ap, ranked_ap
from actprompt.metrics import iou as span_iou
from actprompt.model import ActPromptModel
from actprompt.pretext import (MomentSpan, contrastive_loss, moment_representation, total_loss,
                               triplet_loss)
from actprompt.train import (PreparedData, batch_loss, disjoint_epoch_sampler, finetune,
                             triplet_accuracy)

F64 = dict(dtype=torch.float64)


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 ----------------------------------------------------------------------------

def test_01_gradient_check():
    start = time.time()
    cfg = TrainConfig(encoder=TINY, temporal=TemporalConfig(T=1), batch_size=3)
    spec = SyntheticSpec(num_videos=3, clips_per_video=2, image_size=16, square_size=4,
                         max_window_clips=1)
    videos, records = generate_synthetic(spec, seed=0)
    model = randomize_(ActPromptModel(TINY, cfg.temporal).double(), seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prepared = PreparedData(model, Dataset(records, videos), cfg)
        quads = prepared.quadruples([0, 1, 2], np.random.default_rng(0), cfg)

    def loss():
        return batch_loss(model, quads, prepared.videos, prepared.queries, cfg.loss).l_total

    params = dict(model.trainable_named_parameters())
    model.zero_grad()
    loss().backward()
    analytic = {n: p.grad.detach().clone() for n, p in params.items()}

    eps, worst, groups = 1e-6, 0.0, {}
    with torch.no_grad():
        for name, p in params.items():
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                keep = flat[i].item()
                flat[i] = keep + eps
                up = loss().item()
                flat[i] = keep - eps
                down = loss().item()
                flat[i] = keep
                nflat[i] = (up - down) / (2 * eps)
            denom = max(analytic[name].norm().item(), numeric.norm().item(), 1e-12)
            err = (analytic[name] - numeric).norm().item() / denom
            group = name.split(".")[0]
            if group == "temporal":
                group = name.removesuffix(".weight").removesuffix(".bias")
            groups[group] = max(groups.get(group, 0.0), err)
            worst = max(worst, err)
    elapsed = time.time() - start
    expected = {"video_coupler", "verb_couplers", "temporal.positional", "temporal.generator.fc1",
                "temporal.generator.fc2"}
    detail = f"max rel err {worst:.2e} over {sorted(groups)} in {elapsed:.1f}s"
    report(1, expected <= set(groups) and worst <= 1e-4 and elapsed < 60, detail)


# 2 ----------------------------------------------------------------------------

def test_02_structural_trace():
    torch.manual_seed(5)
    enc = ImageEncoder(TINY).double()
    learner = TemporalPromptLearner(2, TINY.embed_dim, TemporalConfig(T=1)).double()
    with torch.no_grad():
        for p in learner.parameters():
            p.normal_(0, 0.3)
    frames = torch.rand(3, 3, 16, 16, **F64)
    Np, checks = TINY.num_patches, []
    for stream in ("vid", "veb"):
        rows = torch.randn(3 if stream == "vid" else 2, TINY.embed_dim, **F64)
        pack = PromptPack(video=rows, temporal_fn=learner) if stream == "vid" else PromptPack.verb(rows, learner)
        got, ref = enc(frames, pack), unrolled(enc, learner, frames, stream, rows)
        s1, s2 = got.states
        checks += [
            torch.equal(s1.sequence(), ref["seq1"]),
            torch.equal(s2.sequence(), ref["seq2"]),
            [n for n, _, _ in s2.layout] == ["class", "prompt", "patch", "temporal"],
            s2.length == 2 + Np + 3,
            got.final.temporal is None and got.final.sequence().shape[1] == 2 + Np,
            torch.equal(got.features, enc.proj(enc.ln_post(ref["out2"][:, 0]))),
        ]
        if stream == "veb":
            checks.append(torch.equal(s2.prompts[:, 0], rows[1].expand(3, -1)))
    report(2, all(checks), f"{sum(checks)}/{len(checks)} layout, drop and replacement checks exact")


# 3 ----------------------------------------------------------------------------

def test_03_closed_forms():
    reps = torch.ones(3, 4, **F64)
    tri = triplet_loss(reps, reps, torch.ones(4, **F64)).item()
    B = 4
    ce = contrastive_loss(torch.randn(4, **F64), torch.randn(4, **F64).expand(B, 4), 2).item()
    a = torch.rand(2, 3, 4, **F64)
    con = consistency_loss(a, a.clone()).item()
    tot = total_loss(1.0, 1.0, 1.0)
    ok = abs(tri - math.log(9)) <= 1e-9 and abs(ce - math.log(B)) <= 1e-9 and con == 0.0 and tot == 206.0
    report(3, ok, f"triplet {tri:.12f} contrastive {ce:.12f} consistency {con} total {tot}")


# 4 ----------------------------------------------------------------------------

def _fuzz_counts(cases=100, seed=0):
    rng = np.random.default_rng(seed)
    worst = {}

    def note(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    for _ in range(cases):
        F, NL, Np = rng.integers(1, 5, size=3)
        a, b = rng.random((F, NL, Np)), rng.random((F, NL, Np))
        note("consistency", abs(consistency_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
                                - oracles.consistency(a, b)))

        vid, veb, t_q = rng.normal(size=(3, 5)), rng.normal(size=(3, 5)), rng.normal(size=5)
        note("triplet", abs(triplet_loss(torch.from_numpy(vid), torch.from_numpy(veb), torch.from_numpy(t_q)).item()
                            - oracles.triplet(vid, veb, t_q)))

        nq = int(rng.integers(1, 7))
        pos, qs, idx = rng.normal(size=5), rng.normal(size=(nq, 5)), int(rng.integers(nq))
        note("contrastive", abs(contrastive_loss(torch.from_numpy(pos), torch.from_numpy(qs), idx).item()
                                - oracles.contrastive(pos, qs, idx)))

        frames = rng.normal(size=(int(rng.integers(1, 6)), 5))
        note("moment_rep", float(np.max(np.abs(moment_representation(torch.from_numpy(frames)).numpy()
                                                - oracles.moment_rep(frames)))))

        s = np.sort(rng.integers(0, 20000, size=2)) / 1000
        t = np.sort(rng.integers(0, 20000, size=2)) / 1000
        if s[0] == s[1]:
            s[1] += 0.001
        if t[0] == t[1]:
            t[1] += 0.001
        note("iou", abs(span_iou(MomentSpan(*s), MomentSpan(*t)) - oracles.iou_grid(s, t)))

        gts = [tuple(sorted(rng.integers(0, 30, 2) + np.array([0, 1]))) for _ in range(rng.integers(1, 4))]
        gts = [(float(x), float(y)) for x, y in gts if y > x]
        ranked = [(float(x), float(x + w)) for x, w in zip(rng.integers(0, 30, 5), rng.integers(1, 10, 5))]
        pred = GroundingPrediction("q", [(MomentSpan(*r), 1.0 - 0.1 * k) for k, r in enumerate(ranked)])
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        note("ap", abs(query_ap(pred, [MomentSpan(*g) for g in gts], thr) - oracles.detection_ap(ranked, gts, thr)))

        scores, rel = rng.integers(0, 4, 8).astype(float), rng.random(8) < 0.4
        note("ap", abs(ranked_ap(scores, rel) - oracles.ranked_ap(list(scores), list(rel))))
    return worst


def test_04_oracle_equivalence():
    worst = _fuzz_counts(cases=100)
    tol = {k: 1e-6 if k == "iou" else 1e-9 for k in worst}
    ok = all(worst[k] <= tol[k] for k in worst) and len(worst) == 6
    report(4, ok, "100 cases each, max err " + " ".join(f"{k}={v:.1e}" for k, v in sorted(worst.items())))


# 5 ----------------------------------------------------------------------------

def test_05_frozen_backbone(default_run):
    r = default_run["result"]
    ok = r.backbone_hash_before == r.backbone_hash_after == r.model.backbone.hash()
    epochs = len(r.epoch_means())
    report(5, ok and epochs == 10, f"hash {r.backbone_hash_before[:16]} unchanged over {epochs} epochs")


# 6 ----------------------------------------------------------------------------

def test_06_disjoint_sampler():
    ok = True
    for n in (100, 103, 7):
        chunks = [disjoint_epoch_sampler(n, 0.1, e) for e in range(10)]
        flat = [i for c in chunks for i in c]
        ok &= sorted(flat) == list(range(n)) and len(set(flat)) == len(flat)
    report(6, ok, "n in {100, 103, 7}: ten chunks disjoint, union complete")


# 7 ----------------------------------------------------------------------------

def test_07_synthetic_learnability(default_run):
    means = default_run["result"].epoch_means()
    drop = (means[0] - means[-1]) / means[0]
    pre, post = default_run["pre"], default_run["post"]
    detail = (f"epoch mean L_total {means[0]:.3f} -> {means[-1]:.3f} (drop {100 * drop:.1f}%, need >= 20%); "
              f"held-out ordering {pre:.2f} before, {post:.2f} after (need >= 0.80)")
    report(7, drop >= 0.2 and post >= 0.8, detail)


# 8 ----------------------------------------------------------------------------

def test_08_action_vs_vanilla():
    videos, records = generate_synthetic(SyntheticSpec(num_videos=50), seed=0)
    held_v, held_r = generate_synthetic(SyntheticSpec(num_videos=50, prefix="held"), seed=1)
    acc = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for prompt in ("action", "vanilla"):
            acc[prompt] = []
            for seed in range(3):
                cfg = TrainConfig(seed=seed, prompt=prompt)
                model = ActPromptModel(cfg.encoder, cfg.temporal, cfg.prompt, cfg.seed)
                finetune(cfg, Dataset(records, videos), model=model)
                held = PreparedData(model, Dataset(held_r, held_v), cfg)
                acc[prompt].append(triplet_accuracy(model, held, cfg))
    a, v = float(np.mean(acc["action"])), float(np.mean(acc["vanilla"]))
    report(8, a >= v, f"action {a:.3f} {np.round(acc['action'], 2).tolist()} vs vanilla {v:.3f} "
                      f"{np.round(acc['vanilla'], 2).tolist()}, margin {a - v:+.3f}")


# 9 ----------------------------------------------------------------------------

PERSIST_SCRIPT = textwrap.dedent("""
    import hashlib, sys, warnings
    warnings.simplefilter("ignore")
    from actprompt.config import EncoderConfig, TrainConfig
    from actprompt.data import Dataset, SyntheticSpec, feature_bytes, generate_synthetic
    from actprompt.extract import extract
    from actprompt.train import Checkpoint, finetune

    enc = EncoderConfig(image_size=16, embed_dim=16, video_dim=8, num_layers=2, num_heads=2,
                        vocab_size=128, max_tokens=10, pretrain_steps=20)
    cfg = TrainConfig(encoder=enc, epochs=2, data_ratio=0.5, batch_size=4)
    videos, records = generate_synthetic(SyntheticSpec(num_videos=8, clips_per_video=4, image_size=16,
                                                       square_size=4), seed=3)
    ds = Dataset(records, videos)
    ckpt = finetune(cfg, ds).checkpoint
    blob = ckpt.to_bytes()
    again = Checkpoint.from_bytes(blob).to_bytes()
    bundle = feature_bytes(extract(Checkpoint.from_bytes(blob), ds, records[0].video_id, "vid+veb",
                                   records[0].query))
    print(hashlib.sha256(blob).hexdigest(), hashlib.sha256(again).hexdigest(),
          hashlib.sha256(bundle).hexdigest())
""")


def test_09_persistence(tmp_path):
    script = tmp_path / "persist.py"
    script.write_text(PERSIST_SCRIPT)
    digests = []
    for _ in range(2):
        done = subprocess.run([sys.executable, str(script)], capture_output=True, text=True, timeout=600)
        assert done.returncode == 0, done.stderr
        digests.append(done.stdout.split())
    ns = {}
    exec(compile(PERSIST_SCRIPT.replace("print(", "result = ("), "persist", "exec"), ns)
    digests += [ns["result"], list(ns["result"])]
    ckpt_same = len({d[0] for d in digests}) == 1 and all(d[0] == d[1] for d in digests)
    bundle_same = len({d[2] for d in digests}) == 1
    # round trip of a bundle with every optional section and awkward floats
    special = np.array([[0.0, -0.0, 1e-45, -3.4e38]], dtype=np.float32)
    b = FeatureBundle("v", special, special, special, special[0])
    bundle_same &= feature_bytes(parse_features(feature_bytes(b))) == feature_bytes(b)
    report(9, ckpt_same and bundle_same,
           f"checkpoint {digests[0][0][:12]} and bundle {digests[0][2][:12]} identical in 2 processes + 2 in-process runs")


# 10 ---------------------------------------------------------------------------

def test_10_metric_fixture():
    from test_metrics import FIVE_QUERY_EXPECTED

    out = evaluate_retrieval(*five_query_fixture())
    keys = ["R1@0.5", "R1@0.7", "mIoU", "mAP@0.5", "mAP@0.75", "mAP"]
    ok = all(abs(out[k] - FIVE_QUERY_EXPECTED[k]) <= 1e-9 for k in keys)
    report(10, ok, " ".join(f"{k}={out[k]:.4f}" for k in keys))
