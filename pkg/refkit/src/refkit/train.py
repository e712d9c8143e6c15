"""Training, masked fine-tuning, and export into the engine's file formats."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import load_dataset
from .formats import read_container, read_mask, write_container
from .model import CapsNet, export_tensors, margin_loss, model_from_tensors


def _batches(images, labels, batch_size, rng):
    order = rng.permutation(len(images))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield (
            torch.from_numpy(images[idx]).unsqueeze(1).float(),
            torch.from_numpy(labels[idx]),
        )


def evaluate(model: CapsNet, images, labels, batch_size: int = 64) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start : start + batch_size]).unsqueeze(1).float()
            pred = model(x).argmax(dim=1).numpy()
            correct += int((pred == labels[start : start + batch_size]).sum())
    return correct / len(images)


def train_model(
    model: CapsNet,
    images,
    labels,
    epochs: int = 10,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    weight_mask=None,
) -> None:
    """Margin-loss training; `weight_mask` pins pruned kernels at exactly zero."""
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    model.train()
    for _ in range(epochs):
        for x, y in _batches(images, labels, batch_size, rng):
            opt.zero_grad()
            loss = margin_loss(model(x), y)
            loss.backward()
            opt.step()
            if weight_mask is not None:
                _apply_mask(model, weight_mask)


def _apply_mask(model: CapsNet, weight_mask) -> None:
    with torch.no_grad():
        for attr, mask in weight_mask.items():
            param = {"conv1": model.conv1.weight, "primary_caps": model.primary.weight}[attr]
            param.mul_(mask)


def mask_from_file(path, conv1_shape, primary_shape) -> dict:
    """Turn a mask file into {layer: broadcastable 0/1 tensor} for fine-tuning."""
    layers = {m.name: m for m in read_mask(path)}
    out = {}
    if "conv1" in layers:
        grid = layers["conv1"].bits.reshape(conv1_shape[0], conv1_shape[1])
        out["conv1"] = torch.from_numpy(grid.astype(np.float32))[:, :, None, None]
    if "primary_caps" in layers:
        grid = layers["primary_caps"].bits.reshape(primary_shape[0], primary_shape[1])
        out["primary_caps"] = torch.from_numpy(grid.astype(np.float32))[:, :, None, None]
    return out


def dump_activations(model: CapsNet, probe_images) -> dict:
    """Per-layer float32 activation tensors for cross-implementation checks."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(probe_images).unsqueeze(1).float()
        conv1_out = F.relu(model.conv1(x))
        feats = model.primary(conv1_out)
        caps = model.primary_capsules(feats)
        norms = model(x)
    return {
        "probe_images": probe_images.astype(np.float32),
        "conv1.out": conv1_out.numpy().astype(np.float32),
        "primary_caps.out": caps.numpy().astype(np.float32),
        "caps_norms": norms.numpy().astype(np.float32),
    }


def train_and_export(
    dataset_dir,
    out_path,
    epochs: int = 10,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    n_probe: int = 32,
    model: CapsNet | None = None,
    activations_path=None,
    metadata_path=None,
) -> dict:
    """Train on the IDX dataset in `dataset_dir` and export the bundle."""
    data = load_dataset(dataset_dir)
    torch.manual_seed(seed)
    model = model or CapsNet()
    train_model(model, data["train_images"], data["train_labels"],
                epochs=epochs, batch_size=batch_size, lr=lr, seed=seed)
    accuracy = evaluate(model, data["test_images"], data["test_labels"])

    tensors = export_tensors(model)
    write_container(out_path, tensors)
    if activations_path is not None:
        probes = data["test_images"][:n_probe]
        write_container(activations_path, dump_activations(model, probes))
    meta = {
        "dataset": data["name"],
        "epochs": epochs,
        "test_accuracy": accuracy,
        "test_error_pct": 100.0 * (1.0 - accuracy),
    }
    if metadata_path is not None:
        Path(metadata_path).write_text(json.dumps(meta, indent=2))
    return {"model": model, "metadata": meta, "tensors": tensors}


def finetune_pruned(
    weights_path,
    mask_path,
    dataset_dir,
    out_path,
    epochs: int = 10,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> dict:
    """Fine-tune a pruned container; masked kernels stay exactly zero."""
    tensors = read_container(weights_path)
    model = model_from_tensors(tensors)
    mask = mask_from_file(
        mask_path,
        tensors["conv1.weight"].shape,
        tensors["primary_caps.weight"].shape,
    )
    for name, m in mask.items():
        expected = {"conv1": model.conv1.weight, "primary_caps": model.primary.weight}[name]
        if m.shape[:2] != expected.shape[:2]:
            raise ValueError(f"mask for {name} does not match the pruned weights")
    _apply_mask(model, mask)

    data = load_dataset(dataset_dir)
    train_model(model, data["train_images"], data["train_labels"],
                epochs=epochs, batch_size=batch_size, lr=lr, seed=seed,
                weight_mask=mask)
    accuracy = evaluate(model, data["test_images"], data["test_labels"])
    out_tensors = export_tensors(model)
    write_container(out_path, out_tensors)
    return {"model": model, "tensors": out_tensors, "test_accuracy": accuracy}
