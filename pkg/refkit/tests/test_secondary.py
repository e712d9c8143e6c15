"""Secondary acceptance: cross-implementation check (S1) and masked fine-tune (S2).

Runs against real MNIST when CAPSKIT_MNIST_DIR points at the IDX files;
otherwise a synthetic 10-class dataset with the same formats and sizes.
Training happens once per session at desk scale (a couple of minutes on CPU).
"""

import json
import subprocess
import sys

import numpy as np
import pytest
import torch

# engine imports are confined to cross-validation assertions
from capskit.capsnet import CapsNetModel, CapsNetSpec
from capskit.io import load_weights
from capskit.tensor import ConvLayerWeights, conv2d, relu

from refkit.data import load_dataset, real_mnist_dir, write_synthetic_dataset
from refkit.formats import read_container
from refkit.train import finetune_pruned, train_and_export

N_TEST = 1000
TRAIN_EPOCHS = 2
N_TRAIN = 320


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """Dataset + trained/exported bundle shared by every check below."""
    root = tmp_path_factory.mktemp("secondary")
    mnist = real_mnist_dir()
    if mnist:
        dataset_dir = mnist
    else:
        dataset_dir = root / "data"
        write_synthetic_dataset(dataset_dir, N_TRAIN, N_TEST, seed=0)
    torch.manual_seed(0)
    out = train_and_export(
        dataset_dir,
        root / "trained.fc",
        epochs=TRAIN_EPOCHS,
        seed=0,
        activations_path=root / "activations.fc",
        metadata_path=root / "metadata.json",
    )
    return {
        "root": root,
        "dataset_dir": dataset_dir,
        "weights": root / "trained.fc",
        "activations": root / "activations.fc",
        "metadata": root / "metadata.json",
        "model": out["model"],
        "accuracy": out["metadata"]["test_accuracy"],
    }


def engine_model(weights_path) -> CapsNetModel:
    t = load_weights(weights_path)
    in_caps, out_caps, out_dim, caps_dim = t["digit_caps.weight"].shape
    types = t["primary_caps.weight"].shape[0] // caps_dim
    grid = int(round((in_caps // types) ** 0.5))
    spec = CapsNetSpec(
        capsule_types=types,
        caps_dim=caps_dim,
        grid=(grid, grid),
        digit_caps=out_caps,
        digit_dim=out_dim,
        routing_iters=3,
    )
    return CapsNetModel(
        conv1=ConvLayerWeights(t["conv1.weight"].astype(np.float64),
                               t["conv1.bias"].astype(np.float64), 1),
        primary_conv=ConvLayerWeights(t["primary_caps.weight"].astype(np.float64),
                                      t["primary_caps.bias"].astype(np.float64), 2),
        routing_w=t["digit_caps.weight"].astype(np.float64),
        spec=spec,
    )


def run_engine_cli(*argv) -> str:
    proc = subprocess.run(
        [sys.executable, "-m", "capskit.cli", *argv],
        capture_output=True,
        text=True,
        timeout=1800,
    )
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def test_s1_container_loads_and_counts(workspace):
    model = engine_model(workspace["weights"])
    assert model.spec.in_caps == 1152
    assert model.routing_w.size == 1_474_560
    meta = json.loads(workspace["metadata"].read_text())
    assert 0.0 <= meta["test_accuracy"] <= 1.0
    print(f"\nS1a: PASS (routing weights 1474560, trained acc {meta['test_accuracy']:.3f})")


def test_s1_activations_match(workspace):
    dumps = load_weights(workspace["activations"])
    probes = dumps["probe_images"]
    want_conv1 = dumps["conv1.out"]
    model = engine_model(workspace["weights"])
    worst = 0.0
    for i in range(probes.shape[0]):
        got = relu(conv2d(probes[i][None, :, :].astype(np.float64), model.conv1))
        worst = max(worst, float(np.abs(got - want_conv1[i]).max()))
    assert probes.shape[0] >= 32
    assert worst <= 1e-4
    print(f"\nS1b: PASS (conv1 activations L-inf {worst:.2e} over {probes.shape[0]} probes)")


def test_s1_fx_classification_agreement(workspace):
    data = load_dataset(workspace["dataset_dir"])
    images = data["test_images"][:N_TEST]
    # refkit's floating-point classification
    model = workspace["model"]
    model.eval()
    ref_pred = []
    with torch.no_grad():
        for start in range(0, len(images), 64):
            x = torch.from_numpy(images[start : start + 64]).unsqueeze(1).float()
            ref_pred.extend(model(x).argmax(dim=1).numpy().tolist())
    # engine fixed-point classification through the CLI
    image_file = workspace["dataset_dir"] / "t10k-images-idx3-ubyte"
    out = run_engine_cli(
        "infer",
        "--weights", str(workspace["weights"]),
        "--images", str(image_file),
        "--arith", "fx16",
        "--mode", "optimized",
        "--fact", "8",
        "--limit", str(N_TEST),
    )
    fx_pred = [
        int(line.split("class=")[1])
        for line in out.splitlines()
        if line.startswith("image=")
    ]
    assert len(fx_pred) == len(ref_pred) == N_TEST
    agreement = float(np.mean(np.array(fx_pred) == np.array(ref_pred)))
    assert agreement >= 0.98
    print(f"\nS1c: PASS (fx16 vs float agreement {agreement:.3f} on {N_TEST} images)")


@pytest.fixture(scope="session")
def pruned_bundle(workspace):
    """Engine-pruned container + mask at the 7-of-32 capsule configuration."""
    root = workspace["root"]
    cfg = root / "prune.cfg"
    cfg.write_text(
        "sparsity.conv1 = 0.3\n"
        f"sparsity.primary_caps = {25 / 32}\n"
        "granularity.primary_caps = capsule_group\n"
    )
    out_w = root / "pruned.fc"
    out_m = root / "pruned.fm"
    run_engine_cli(
        "prune", str(workspace["weights"]),
        "--out", str(out_w), "--mask-out", str(out_m), "--config", str(cfg),
    )
    return {"weights": out_w, "mask": out_m}


def test_s2_finetune_preserves_zeros_and_counts(workspace, pruned_bundle):
    root = workspace["root"]
    out_path = root / "finetuned.fc"
    result = finetune_pruned(
        pruned_bundle["weights"],
        pruned_bundle["mask"],
        workspace["dataset_dir"],
        out_path,
        epochs=1,
        seed=1,
    )
    tensors = read_container(out_path)
    # P3 counts survive fine-tuning
    assert tensors["digit_caps.weight"].shape == (252, 10, 16, 8)
    assert tensors["digit_caps.weight"].size == 322_560
    assert tensors["primary_caps.weight"].shape[0] == 56
    # the engine can load and run the fine-tuned container
    model = engine_model(out_path)
    assert model.spec.in_caps == 252
    acc = result["test_accuracy"]
    print(f"\nS2a: PASS (252-capsule counts preserved, fine-tuned acc {acc:.3f})")


def test_s2_masked_weights_stay_exactly_zero(workspace):
    # kernel-granularity pruning gives a non-trivial compacted mask
    root = workspace["root"]
    cfg = root / "prune_kernel.cfg"
    cfg.write_text("sparsity.conv1 = 0.3\nsparsity.primary_caps = 0.6\n")
    out_w = root / "pruned_kernel.fc"
    out_m = root / "pruned_kernel.fm"
    run_engine_cli(
        "prune", str(workspace["weights"]),
        "--out", str(out_w), "--mask-out", str(out_m), "--config", str(cfg),
    )
    from refkit.formats import read_mask

    masks = {m.name: m for m in read_mask(out_m)}
    grid = masks["primary_caps"]
    n_masked = int((~grid.bits).sum())
    assert n_masked > 0, "config must produce masked kernels inside surviving channels"

    out_path = root / "finetuned_kernel.fc"
    finetune_pruned(out_w, out_m, workspace["dataset_dir"], out_path, epochs=1, seed=2)
    tensors = read_container(out_path)
    pruned_in = read_container(out_w)
    w = tensors["primary_caps.weight"]
    mask2d = grid.bits.reshape(w.shape[0], w.shape[1])
    assert np.all(w[~mask2d] == 0.0), "masked kernels must stay exactly zero"
    # and training actually moved the surviving weights
    assert not np.allclose(w[mask2d], pruned_in["primary_caps.weight"][mask2d])
    print(f"\nS2b: PASS ({n_masked} masked kernels exactly zero after fine-tuning)")
