"""Acceptance suite. Each test records one PASS/FAIL line (see conftest).

The slow criteria share session fixtures: one simulated desk dataset and
the five training runs over it.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

import gradcases
from das_forge import dataset, demod, harness, sim
from das_forge.harness import ImageSet, TrainConfig
from das_forge.model import ModelConfig, TwoStageClassifier


def desk_bases(seed):
    cfg = sim.preset("desk", seed=seed)
    spec = demod.BandpassSpec.for_pulse(cfg.f_aom_hz, cfg.pulse_width_s, cfg.fast_rate_hz)
    bases = []
    for rec in sim.simulate_classes(cfg):
        amp, phase = demod.preprocess(rec, spec)
        bases.append(dataset.BasePair(amp, phase, rec.label, rec.label.name))
    return bases


@pytest.fixture(scope="session")
def desk_base_pairs():
    return desk_bases(0)


@pytest.fixture(scope="session")
def desk_dataset(desk_base_pairs, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    manifest = dataset.build_dataset(desk_base_pairs, out / "ds", seed=0)
    train_m, test_m = dataset.split(manifest, 0.7, seed=0)
    return manifest, (train_m, test_m), time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_runs(desk_dataset):
    manifest = desk_dataset[0]
    images = ImageSet.from_manifest(manifest)
    cfg = TrainConfig()
    start = time.perf_counter()
    reports, model = [], None
    for s in harness.run_seeds(cfg.seed, 5):
        model, rep, _ = harness.single_run(manifest, images, ModelConfig(), cfg, s)
        reports.append(rep)
    return reports, model, images, time.perf_counter() - start


def test_1_augmentation_and_split(desk_dataset, verdict):
    manifest, (train_m, test_m), elapsed = desk_dataset
    tags = manifest.augmentation
    relocated = sum(1 for s in manifest.samples if "flip" not in s.augmentation)
    counts = (15, relocated, len(manifest), len(train_m), len(test_m))
    ok = counts == (15, 150, 300, 210, 90) and set(manifest.counts_per_class().values()) == {20}
    ok = ok and elapsed < 60
    verdict(1, ok, f"bases/relocated/total/train/test = {counts}, offsets {tags['offsets']}, {elapsed:.1f}s")


def test_2_gradient_suite(verdict):
    start = time.perf_counter()
    worst = {}
    for layer, case in gradcases.CASES.items():
        worst[layer] = max(case(seed) for seed in range(10))
    elapsed = time.perf_counter() - start
    failing = {k: v for k, v in worst.items() if not v <= gradcases.TOLERANCES[k]}
    summary = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, not failing and elapsed < 120, f"worst rel err: {summary}; {elapsed:.0f}s")


def _pzt_tracking(cfg):
    spec = demod.BandpassSpec.for_pulse(cfg.f_aom_hz, cfg.pulse_width_s, cfg.fast_rate_hz)
    before, after = demod.pzt_reference_windows(cfg)
    rows = []
    for rec in sim.simulate_classes(cfg):
        amp, phase = demod.demodulate(rec, spec)
        d = demod.cross_pzt_phase(phase, amp, before, after)
        lab = rec.label
        want_bin = demod.event_bin(lab.frequency_hz, cfg.n_traces, cfg.prf_hz)
        fitted, _ = demod.fit_sinusoid(d, lab.frequency_hz, cfg.prf_hz)
        expected = cfg.k_pzt_rad_per_volt * lab.amplitude_v
        rows.append((lab.name, demod.spectrum_peak_bin(d) == want_bin, abs(fitted - expected) / expected))
    return rows


def test_3_demodulation_fidelity(verdict):
    start = time.perf_counter()
    clean = _pzt_tracking(sim.preset("desk", snr_db=None))
    noisy = _pzt_tracking(sim.preset("desk", snr_db=20.0))
    elapsed = time.perf_counter() - start
    bins_clean = sum(r[1] for r in clean)
    amp_ok = sum(r[2] <= 0.10 for r in clean)
    bins_noisy = sum(r[1] for r in noisy)
    worst = max(r[2] for r in clean)
    ok = bins_clean == amp_ok == bins_noisy == 15 and elapsed < 300
    verdict(3, ok, f"clean peak bins {bins_clean}/15, amplitudes within 10% {amp_ok}/15 "
                   f"(worst {worst:.3f}), 20 dB peak bins {bins_noisy}/15; {elapsed:.0f}s")


def test_4_analytic_signal_identity(verdict):
    rng = np.random.default_rng(4)
    worst_mag = worst_re = 0.0
    for n in (64, 255, 4700):
        for _ in range(5):
            k = int(rng.integers(1, (n - 1) // 2))
            a, phi = rng.uniform(0.1, 3.0), rng.uniform(0, 2 * math.pi)
            x = a * np.cos(2 * math.pi * k * np.arange(n) / n + phi)
            z = demod.analytic_signal(x)
            worst_mag = max(worst_mag, float(np.max(np.abs(np.abs(z) - a))))
            worst_re = max(worst_re, float(np.max(np.abs(z.real - x))))
    verdict(4, worst_mag <= 1e-9 and worst_re <= 1e-9,
            f"max | |z| - A | = {worst_mag:.1e}, max |Re z - x| = {worst_re:.1e}")


def test_5_end_to_end_classification(desk_runs, verdict):
    reports, _, _, elapsed = desk_runs
    acc = [r.accuracy for r in reports]
    ok = np.mean(acc) >= 0.95 and min(acc) >= 0.90 and elapsed <= 30 * 60
    verdict(5, ok, f"accuracies {[round(a, 4) for a in acc]}, mean {np.mean(acc):.4f}, {elapsed:.0f}s on "
                   "this machine")


def test_6_frozen_pretrained_extractor(desk_dataset, tmp_path_factory, verdict):
    manifest = desk_dataset[0]
    out = tmp_path_factory.mktemp("aux")
    # auxiliary data: another simulated fiber, its own seed
    aux = dataset.build_dataset(desk_bases(1), out / "ds", seed=1)
    donor = TwoStageClassifier(ModelConfig(), seed=101)
    harness.train(donor, ImageSet.from_manifest(aux), TrainConfig(), seed=101)
    ext_path = out / "extractor.wgt"
    donor.save_weights(ext_path, donor.extractor_names())

    images = ImageSet.from_manifest(manifest)
    frozen_cfg = ModelConfig(freeze_extractor=True)
    acc, identical = [], True
    for s in harness.run_seeds(7, 3):
        model, rep, _ = harness.single_run(manifest, images, frozen_cfg, TrainConfig(), s, str(ext_path))
        acc.append(rep.accuracy)
        identical &= all(model.params[k].tobytes() == donor.params[k].tobytes() for k in donor.extractor_names())
    ok = identical and np.mean(acc) >= 0.80
    verdict(6, ok, f"extractor bit-identical {identical}, frozen accuracies {[round(a, 4) for a in acc]}, "
                   f"mean {np.mean(acc):.4f}")


def test_7_embedding_quality_ordering(desk_runs, verdict):
    _, model, images, _ = desk_runs
    agree = {}
    for stage in (1, 2):
        emb = harness.extract_embeddings(model, images, stage, perplexity=30, n_iter=1000, seed=0)
        agree[stage] = harness.knn1_agreement(emb.coords, emb.labels)
    ok = agree[2] >= agree[1] and agree[2] >= 0.9
    verdict(7, ok, f"1-NN agreement stage 1 {agree[1]:.4f}, stage 2 {agree[2]:.4f}")


def _reproduce(root, seed=11):
    def cli(*args):
        cmd = [sys.executable, "-m", "das_forge.cli", "--seed", str(seed), "--threads", "1", *map(str, args)]
        subprocess.run(cmd, check=True, capture_output=True)

    cli("simulate", "--preset", "tiny", "--out", root / "raw")
    cli("demod", "--in-dir", root / "raw", "--out-dir", root / "base")
    cli("dataset", "build", "--base-dir", root / "base", "--out-dir", root / "ds", "--img-size", 16)
    cli("train", "--dataset", root / "ds/manifest.json", "--out", root / "run", "--epochs", 2, "--no-plots")
    cli("eval", "--dataset", root / "ds/manifest.json", "--weights", root / "run/weights.wgt",
        "--model-config", root / "run/model_config.json", "--split", root / "run/split.json",
        "--out", root / "eval", "--no-plots")
    return {rel: (root / rel).read_bytes()
            for rel in ("ds/manifest.json", "run/weights.wgt", "run/report.json", "eval/eval.json")}


def test_8_cli_determinism(tmp_path, verdict):
    a = _reproduce(tmp_path / "a")
    b = _reproduce(tmp_path / "b")
    differing = [k for k in a if a[k] != b[k]]
    verdict(8, not differing, f"compared {sorted(a)}; differing: {differing or 'none'}")
