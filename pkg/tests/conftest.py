import time

import pytest
import torch

torch.set_num_threads(1)

# one line per acceptance criterion, printed after the run so they survive capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small synthetic paired corpus shared by training/CLI/retrieval tests."""
    from crossview.synth import SynthConfig, synth_dataset

    root = tmp_path_factory.mktemp("tiny_corpus")
    train, test = synth_dataset(SynthConfig(seed=5, n_pairs=48, n_species=6), str(root))
    return {
        "root": str(root),
        "train": str(root / "train.jsonl"),
        "test": str(root / "test.jsonl"),
        "n_species": 6,
        "train_manifest": train,
        "test_manifest": test,
    }


@pytest.fixture(scope="session")
def probe_chain(tmp_path_factory):
    """Single-stream pretrain -> probe (vs random-init control) -> finetune.

    Shallow joint encoder and small batches: on 1k synthetic pairs the
    matching objective needs ~2k optimizer steps before probed features
    clearly beat random-feature probing, and depth 2 keeps that affordable.
    """
    from crossview.synth import SynthConfig, synth_dataset
    from crossview.train import default_phase_config, run_phase

    root = tmp_path_factory.mktemp("chain")
    started = time.perf_counter()
    synth_dataset(SynthConfig(seed=11, n_pairs=1000, n_species=10), str(root / "data"))
    train = str(root / "data" / "train.jsonl")
    test = str(root / "data" / "test.jsonl")

    pre_cfg = default_phase_config(
        "pretrain", arch="cvm", seed=11, epochs=20, batch_size=8, base_lr=1e-4, depth=2
    )
    pretrained = run_phase(pre_cfg, train, str(root / "pretrain"))

    probe_cfg = default_phase_config("probe", arch="cvm", seed=11, n_classes=10, depth=2)
    probed = run_phase(
        probe_cfg, train, str(root / "probe"),
        test_manifest_path=test, init_checkpoint=pretrained.checkpoint_path,
    )
    # identical probe without the pretrained backbone: the control case
    control = run_phase(
        probe_cfg, train, str(root / "probe_random"), test_manifest_path=test
    )

    ft_cfg = default_phase_config(
        "finetune", arch="cvm", seed=11, n_classes=10, depth=2, epochs=2, batch_size=8
    )
    tuned = run_phase(
        ft_cfg, train, str(root / "finetune"),
        test_manifest_path=test, init_checkpoint=probed.checkpoint_path,
    )
    return {
        "root": str(root),
        "train": train,
        "test": test,
        "pretrain": pretrained,
        "probe": probed,
        "probe_random": control,
        "finetune": tuned,
        "elapsed_s": time.perf_counter() - started,
    }


@pytest.fixture(scope="session")
def aligned_cve(tmp_path_factory):
    """Two-tower model contrastively trained on synthetic habitats.

    Both encoders learn here: against a frozen random satellite tower the
    alignment is far too slow at this scale to separate habitats.
    """
    from crossview.checkpoint import build_pretrain_model, load_checkpoint
    from crossview.synth import SynthConfig, synth_dataset
    from crossview.train import default_phase_config, load_pairs, run_phase

    root = tmp_path_factory.mktemp("aligned")
    synth_dataset(SynthConfig(seed=19, n_pairs=240, n_species=4), str(root / "data"))
    train = str(root / "data" / "train.jsonl")
    cfg = default_phase_config(
        "pretrain", arch="cve", seed=19, epochs=20, batch_size=8,
        base_lr=1e-4, depth=2, freeze_satellite=False,
    )
    result = run_phase(cfg, train, str(root / "pretrain"))
    model = build_pretrain_model(load_checkpoint(result.checkpoint_path))
    model.eval()
    return {
        "model": model,
        "data": load_pairs(train),
        "train": train,
        "checkpoint": result.checkpoint_path,
        "n_species": 4,
    }
