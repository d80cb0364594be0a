"""Shared fixtures and acceptance-report plumbing.

The acceptance tests each record one line into a session-wide report; the
report is printed in the terminal summary so every run ends with one
``ACCEPTANCE n: PASS/FAIL`` line per criterion.

The desk-scale training run (used by two criteria) is a session-scoped
fixture so the models are trained once per session.
"""

import dataclasses
import time

import numpy as np
import pytest

from lka3d import inference, metrics, network, pipeline, training

_ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Recorder: call with (number, description, passed, detail)."""

    def _record(num, description, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        line = f"ACCEPTANCE {num}: {status} - {description}"
        if detail:
            line += f" [{detail}]"
        _ACCEPTANCE_LINES[num] = line
        print(line, flush=True)

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(_ACCEPTANCE_LINES[num])


# ---------------------------------------------------------------------------
# Desk-scale protocol, shared by the training and blur-probe criteria.
# ---------------------------------------------------------------------------

DESK_CHANNELS = (8, 16, 32, 64, 80, 80)
# preprocess_case appends a foreground-mask channel to the 1-channel image
DESK_IN_CHANNELS = 2
DESK_SYNTH = pipeline.SyntheticSpec(
    shape=(48, 48, 48),
    lesion_count_range=(3, 6),
    radius_range_vox=(5, 8),
    intensity_contrast=2.0,
    noise_sigma=0.05,
)
DESK_TRAIN_CASES = 32
DESK_HELDOUT_CASES = 8
DESK_STEPS = 300
DESK_WINDOW = inference.WindowSpec(size=(32, 32, 32), overlap=0.5)


def make_desk_dataset():
    """40 deterministic synthetic cases: 32 train + 8 held-out."""
    cases = []
    for i in range(DESK_TRAIN_CASES + DESK_HELDOUT_CASES):
        img, lbl = pipeline.synth_case(dataclasses.replace(DESK_SYNTH, seed=1000 + i))
        cases.append((pipeline.preprocess_case(img), lbl))
    return cases[:DESK_TRAIN_CASES], cases[DESK_TRAIN_CASES:]


def desk_model(variant, seed):
    cfg = network.ModelConfig(
        variant=variant,
        in_channels=DESK_IN_CHANNELS,
        num_classes=2,
        stage_channels=DESK_CHANNELS,
    )
    return network.build(cfg, seed=seed)


def heldout_dice(model, heldout, tta=False):
    """Mean foreground dice over the held-out cases."""
    scores = []
    for img, lbl in heldout:
        if tta:
            logits = inference.tta_flips(model, img, DESK_WINDOW)
        else:
            logits = inference.sliding_window(model, img, DESK_WINDOW)
        pred = inference.logits_to_labels(logits)
        scores.append(metrics.dice(pred.data[0] == 1, lbl.data[0] == 1))
    return float(np.mean(scores)), scores


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Train both desk-scale variants once; reused by several tests."""
    out_root = tmp_path_factory.mktemp("desk")
    train_cases, heldout = make_desk_dataset()
    result = {"heldout": heldout, "models": {}, "history": {},
              "dice": {}, "dice_mean": {}, "train_seconds": {}}
    t_all = time.perf_counter()
    for variant in ("lka_e", "plain_unet"):
        model = desk_model(variant, seed=0)
        cfg = training.TrainConfig(
            lr=2e-4 if variant == "plain_unet" else 1e-4,
            clip_norm=12.0 if variant == "plain_unet" else 1.0,
            batch_size=2,
            epochs=(DESK_STEPS * 2 + DESK_TRAIN_CASES - 1) // DESK_TRAIN_CASES,
            crop_size=(32, 32, 32),
            seed=0,
        )
        t0 = time.perf_counter()
        history = training.train(model, train_cases, cfg,
                                 out_dir=out_root / variant,
                                 max_steps=DESK_STEPS)
        result["train_seconds"][variant] = time.perf_counter() - t0
        mean_d, per_case = heldout_dice(model, heldout)
        result["models"][variant] = model
        result["history"][variant] = history
        result["dice"][variant] = per_case
        result["dice_mean"][variant] = mean_d
    result["total_seconds"] = time.perf_counter() - t_all
    return result
