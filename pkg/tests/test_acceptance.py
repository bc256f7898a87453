"""Acceptance suite: one PASS/FAIL line per criterion, collected in the terminal summary.

The convergence, ablation, robustness and checkpoint criteria share one trained
toy system (module fixture); the ablation adds five more fine-tuning runs, so
the whole file takes roughly 1 h 45 min on a single CPU core.
"""

import math
import time
import warnings

import numpy as np
import pytest
import torch

from oracles import bce_reference, finite_difference_check, rms_db, sine
from p2mark.adapter import inject_adapters, verify_merge_equivalence
from p2mark.attacks import BATTERY, AttackSpec, apply_attack, find_ffmpeg, pink_noise
from p2mark.evaluation import evaluate_instance
from p2mark.models.generator import ToyVocoder
from p2mark.objectives import discriminator_loss, generator_adversarial_loss, generator_loss, watermark_loss
from p2mark.pipeline import checkpoint as ckpt
from p2mark.pipeline.config import toy_config
from p2mark.pipeline.data import synthetic_corpus
from p2mark.pipeline.training import load_base, load_system, mint_instance, pretrain_base, train_p2mark
from p2mark.watermark import Watermark, WatermarkEncoder, encode_watermark, random_watermark
from p2mark.wgopo import project

SR = 16000
HELD_OUT_WATERMARKS = 64
DISTINCT_INSTANCES = 8
ABLATION_SEEDS = (0, 1, 2)
ABLATION_WATERMARKS = 8


def quietly(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


def held_out_set():
    # a corpus seed never used for training
    return torch.from_numpy(np.stack(synthetic_corpus(16, seed=123).clips))


def distinct_watermarks(l, count, start):
    out, k = [], start
    while len(out) < count:
        w = random_watermark(l, k)
        if w not in out:
            out.append(w)
        k += 1
    return out


@pytest.fixture(scope="module")
def toy_run():
    """Pretrain once, then fine-tune with projection on (seed 0) at the toy scale."""
    torch.set_num_threads(1)
    cfg = toy_config()
    corpus = synthetic_corpus(200, duration=1.0, sample_rate=SR, seed=0)
    t0 = time.perf_counter()
    base = quietly(pretrain_base, cfg, corpus)
    frozen = {k: v.numpy().tobytes() for k, v in base.generator.state_dict().items()}
    system = quietly(train_p2mark, cfg, corpus, base)
    elapsed = time.perf_counter() - t0
    return dict(cfg=cfg, corpus=corpus, base=base, system=system, frozen=frozen, elapsed=elapsed)


def mean_mel_distance(system, base, clips, watermarks):
    return float(np.mean([evaluate_instance(mint_instance(system, w), system.decoder, clips, base).mel_distance
                          for w in watermarks]))


class TestCriterion1MergeIdentity:
    def test_merge_identity(self, verdict):
        t0 = time.perf_counter()
        cfg = toy_config()
        torch.manual_seed(0)
        template = ToyVocoder(cfg.generator)
        worst, zero_b_exact = 0.0, True
        for seed in range(100):
            torch.manual_seed(seed)
            adapted = quietly(inject_adapters, template, cfg.r, cfg.layer_selector)
            zero_b = seed % 10 == 0
            if not zero_b:
                with torch.no_grad():
                    for name, p in adapted.lora_named_parameters():
                        if name.endswith("lora_B"):
                            p.normal_(0.0, 0.1)
            enc = WatermarkEncoder(cfg.l, cfg.r)
            w = random_watermark(cfg.l, seed)
            with torch.no_grad():
                s = encode_watermark(w, enc)
            merged = adapted.merged_generator(s, template)
            probe = [torch.randn(1, cfg.generator.in_channels, 8)]
            diff = verify_merge_equivalence(adapted, merged, probe, s)
            if zero_b:
                zero_b_exact &= diff == 0.0
            else:
                worst = max(worst, diff)
        runtime = time.perf_counter() - t0
        ok = worst < 1e-5 and zero_b_exact and runtime < 60
        verdict(1, ok, f"max diff {worst:.2e} (< 1e-5), B=0 exact {zero_b_exact}, {runtime:.1f}s (< 60s)")


class TestCriterion2Projection:
    def test_projection_suite(self, verdict):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_constraint, worst_idem = math.inf, 0.0
        noop_identity, n_conflict, n_noop = True, 0, 0
        dims = (2, 10, 10_000)
        for i in range(1000):
            d = dims[i % 3]
            g = torch.from_numpy(rng.standard_normal(d))
            w = torch.from_numpy(rng.standard_normal(d) * rng.uniform(0.1, 10))
            p = project(g, w)
            if float(torch.dot(g, w)) >= 0:
                n_noop += 1
                noop_identity &= p is g and torch.equal(p, g)
            else:
                n_conflict += 1
            slack = float(torch.dot(p, w)) / (float(p.norm() * w.norm()) or 1.0)
            worst_constraint = min(worst_constraint, slack)
            worst_idem = max(worst_idem, float((project(p, w) - p).abs().max()))
        hand = project(torch.tensor([-1.0, 1.0]), torch.tensor([1.0, 0.0]))
        hand_ok = hand.tolist() == [0.0, 1.0]
        runtime = time.perf_counter() - t0
        ok = worst_constraint >= -1e-6 and noop_identity and worst_idem <= 1e-7 and hand_ok and runtime < 30
        verdict(
            2, ok,
            f"min cos {worst_constraint:.1e} (>= -1e-6), no-op identity {noop_identity} ({n_noop} pairs), "
            f"idempotence {worst_idem:.1e} (<= 1e-7, {n_conflict} conflicts), hand case {hand.tolist()}, {runtime:.1f}s",
        )


class TestCriterion3ScalingAlgebra:
    def test_scaling_algebra(self, verdict):
        t0 = time.perf_counter()
        torch.manual_seed(0)
        enc = WatermarkEncoder(8, 16)
        with torch.no_grad():
            zero_ok = torch.equal(encode_watermark(Watermark((0,) * 8), enc), torch.ones(16))

        # dyadic table: every step of the encoding is exact in binary floating point
        l, r = 16, 16
        rng = np.random.default_rng(1)
        table = torch.zeros(l, r, dtype=torch.float64)
        for i in range(l):
            table[i, rng.choice(r, size=4, replace=False)] = torch.from_numpy(rng.choice([-0.25, 0.25], size=4))
        exact = WatermarkEncoder(l, r).double()
        with torch.no_grad():
            exact.v.copy_(table)
            exact.g.copy_(table.norm(dim=1))
        additive = True
        for _ in range(200):
            a = int(rng.integers(0, 2**l))
            b = int(rng.integers(0, 2**l)) & ~a
            wa = Watermark(tuple((a >> i) & 1 for i in range(l)))
            wb = Watermark(tuple((b >> i) & 1 for i in range(l)))
            wab = Watermark(tuple((a | b) >> i & 1 for i in range(l)))
            with torch.no_grad():
                lhs = encode_watermark(wab, exact) - 1
                rhs = (encode_watermark(wa, exact) - 1) + (encode_watermark(wb, exact) - 1)
            additive &= torch.equal(lhs, rhs)

        injective = True
        for l, r in ((4, 4), (8, 8), (8, 16)):
            torch.manual_seed(l + r)
            e = WatermarkEncoder(l, r)
            bits = torch.tensor([[(k >> i) & 1 for i in range(l)] for k in range(2**l)], dtype=torch.float32)
            with torch.no_grad():
                s = e(bits)
            injective &= len(torch.unique(s, dim=0)) == 2**l
        runtime = time.perf_counter() - t0
        ok = zero_ok and additive and injective and runtime < 5
        verdict(3, ok, f"zero watermark s == 1 {zero_ok}, additivity exact {additive}, injective {injective}, {runtime:.2f}s")


class TestCriterion4Losses:
    def test_loss_values(self, verdict):
        l = 8
        probs = torch.full((4, l), 0.5, dtype=torch.float64)
        bits = torch.from_numpy(np.random.default_rng(0).integers(0, 2, (4, l))).double()
        bce = watermark_loss(probs, bits).item()
        bce_ok = abs(bce - l * math.log(2)) < 1e-6 and abs(bce - np.mean([bce_reference(p, b) for p, b in zip(probs.tolist(), bits.tolist())])) < 1e-9

        real = [torch.ones(3, 5), torch.ones(2, 7)]
        fake = [torch.zeros(3, 5), torch.zeros(2, 7)]
        d_opt = discriminator_loss(real, fake).item()
        g_opt = generator_adversarial_loss([torch.ones(3, 5), torch.ones(2, 7)]).item()
        weighted = generator_loss(1.0, 0.5, 0.1, toy_config().losses)
        fd = finite_difference_check(n_params=20)
        ok = bce_ok and d_opt == 0.0 and g_opt == 0.0 and abs(weighted - 6.5) < 1e-9 and fd < 1e-3
        verdict(
            4, ok,
            f"BCE {bce:.9f} vs l ln2 {l * math.log(2):.9f}, LSGAN optima {d_opt}/{g_opt}, "
            f"weighted sum {weighted!r}, finite-difference rel err {fd:.1e} (< 1e-3)",
        )


class TestCriterion5Convergence:
    def test_held_out_accuracy_and_distinct_instances(self, toy_run, verdict):
        system, base, cfg = toy_run["system"], toy_run["base"], toy_run["cfg"]
        clips = held_out_set()
        t0 = time.perf_counter()
        fresh = [random_watermark(cfg.l, 10_000 + k) for k in range(HELD_OUT_WATERMARKS)]
        accs = [evaluate_instance(mint_instance(system, w), system.decoder, clips, base).acc for w in fresh]
        own = [evaluate_instance(mint_instance(system, w), system.decoder, clips, base).acc
               for w in distinct_watermarks(cfg.l, DISTINCT_INSTANCES, 20_000)]
        runtime = toy_run["elapsed"] + time.perf_counter() - t0
        held = float(np.mean(accs))
        ok = (held >= 0.95 and min(own) >= 0.95 and runtime <= 45 * 60
              and cfg.max_iterations <= 5000 and (cfg.l, cfg.r, cfg.batch_size) == (8, 16, 16))
        verdict(
            5, ok,
            f"held-out ACC {held:.4f} over {len(fresh)} watermarks (>= 0.95), "
            f"worst of {len(own)} distinct instances {min(own):.4f} (>= 0.95), "
            f"{cfg.max_iterations} iterations, {runtime / 60:.1f} min (<= 45)",
        )


class TestCriterion6Ablation:
    def test_projection_does_not_hurt_quality(self, toy_run, verdict):
        cfg, corpus, base = toy_run["cfg"], toy_run["corpus"], toy_run["base"]
        clips = held_out_set()
        marks = distinct_watermarks(cfg.l, ABLATION_WATERMARKS, 30_000)
        arms = {True: [], False: []}
        for seed in ABLATION_SEEDS:
            for enabled in (True, False):
                if seed == cfg.seed and enabled:
                    system = toy_run["system"]
                else:
                    system = quietly(train_p2mark, cfg.replace(seed=seed, wgopo_enabled=enabled), corpus, base)
                assert system.iteration == cfg.max_iterations
                arms[enabled].append(mean_mel_distance(system, base, clips, marks))
        on, off = float(np.mean(arms[True])), float(np.mean(arms[False]))
        per_seed = ", ".join(f"{a:.4f}/{b:.4f}" for a, b in zip(arms[True], arms[False]))
        verdict(
            6, on <= off,
            f"mel distance with projection {on:.4f} <= without {off:.4f} "
            f"(seeds {ABLATION_SEEDS}, on/off per seed {per_seed}, {cfg.max_iterations} iterations each)",
        )


class TestCriterion7AttackSignals:
    def test_attack_properties(self, verdict):
        import scipy.signal

        t0 = time.perf_counter()
        crop_ok = all(len(apply_attack(np.ones(n), SR, AttackSpec("crop"))) == math.ceil(n / 2)
                      for n in (1, 2, 3, 1001, 16000, 16001))
        x = np.random.default_rng(0).uniform(-1, 1, SR).astype(np.float32)
        roundtrip = float(np.max(np.abs(apply_attack(apply_attack(x, SR, AttackSpec("boost")), SR, AttackSpec("duck")) - x)))
        stds = [apply_attack(np.zeros(10 * SR), SR, AttackSpec("white_noise", seed=s)).std() for s in range(5)]
        white_ok = all(0.0475 <= s <= 0.0525 for s in stds)
        low = rms_db(sine(4000, SR, SR)) - rms_db(apply_attack(sine(4000, SR, SR), SR, AttackSpec("lowpass"))[SR // 10:])
        high = rms_db(sine(100, SR, SR)) - rms_db(apply_attack(sine(100, SR, SR), SR, AttackSpec("highpass"))[SR // 10:])
        slopes = []
        for s in range(5):
            f, p = scipy.signal.welch(pink_noise(4 * SR, 0.1, np.random.default_rng(s)), SR, nperseg=4096)
            band = (f >= 100) & (f <= 4000)
            slopes.append(np.polyfit(np.log10(f[band]), np.log10(p[band]), 1)[0])
        slope_ok = all(-1.3 <= s <= -0.7 for s in slopes)
        lengths = [len(apply_attack(sine(440, SR, n), SR, AttackSpec("resample", {"rates": rates}))) - n
                   for n in (8000, 8191, 12345, 16000) for rates in ((44100,), (24000, 44100))]
        resample_ok = max(abs(d) for d in lengths) <= 2
        runtime = time.perf_counter() - t0
        ok = (crop_ok and roundtrip <= 1e-6 and white_ok and low >= 20 and high >= 20
              and slope_ok and resample_ok and runtime < 120)
        verdict(
            7, ok,
            f"crop exact {crop_ok}, boost/duck {roundtrip:.1e}, white std {min(stds):.4f}..{max(stds):.4f}, "
            f"lowpass {low:.1f} dB, highpass {high:.1f} dB, pink slope {min(slopes):.2f}..{max(slopes):.2f}, "
            f"resample length drift {max(abs(d) for d in lengths)}, {runtime:.1f}s",
        )


class TestCriterion8Robustness:
    THRESHOLD_ROWS = ("None", "boost", "duck", "resample", "resample_24k")

    def test_battery_report(self, toy_run, verdict):
        system, base, cfg = toy_run["system"], toy_run["base"], toy_run["cfg"]
        instance = mint_instance(system, random_watermark(cfg.l, 40_000))
        report = evaluate_instance(instance, system.decoder, held_out_set(), base, attacks=True, seed=0)
        names = [row["attack"] for row in report.attacks]
        full = names == [name for name, _, _ in BATTERY] and len(names) == 14
        ran = [r for r in report.attacks if not r["skipped"]]
        expected_ran = 14 if find_ffmpeg() else 12
        accs = {r["attack"]: r["acc"] for r in ran}
        gated = {n: accs[n] for n in self.THRESHOLD_ROWS}
        ok = full and len(ran) == expected_ran and all(a >= 0.90 for a in gated.values())
        table = ", ".join(f"{n} {a:.3f}" for n, a in accs.items())
        verdict(8, ok, f"{len(names)} rows ({len(ran)} run), gated rows >= 0.90: {gated}; all rows: {table}")


class TestCriterion9Checkpoints:
    def test_round_trip_and_frozen_base(self, toy_run, tmp_path, verdict):
        system, base = toy_run["system"], toy_run["base"]
        base.save(tmp_path / "base")
        system.save(tmp_path / "adapter")
        identical = True
        for name, obj in (("base", base), ("adapter", system)):
            loaded, _ = ckpt.load_checkpoint(tmp_path / name)
            for key, tensor in obj.tensors().items():
                blob = tensor.detach().contiguous().numpy().astype("<f4").tobytes()
                identical &= loaded[key].numpy().tobytes() == blob == ckpt.tensor_bytes(tmp_path / name, key)
        reloaded = load_system(tmp_path / "adapter", load_base(tmp_path / "base"))
        reloaded.save(tmp_path / "again")
        identical &= (tmp_path / "adapter" / ckpt.BLOBS).read_bytes() == (tmp_path / "again" / ckpt.BLOBS).read_bytes()

        after = system.adapted.base_state_dict()
        frozen = toy_run["frozen"]
        untouched = set(after) == set(frozen) and all(after[k].numpy().tobytes() == frozen[k] for k in frozen)
        verdict(9, identical and untouched, f"blobs byte-identical {identical}, frozen W0 byte-identical {untouched}")
