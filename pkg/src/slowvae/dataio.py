"""Bit-exact binary file formats and hashing helpers.

Dataset files ("SLDS") hold frames and labels as little-endian float32;
checkpoint files ("SLCK") hold a JSON header (architecture, config echo,
loss log) followed by all parameters as little-endian float64 in declared
layer order. Reading back a file reproduces every value bit for bit.

All writes are atomic (write to a temp file, then rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from . import nn, training, vae
from .ballsim import Dataset
from .errors import FormatError

DATASET_MAGIC = b"SLDS"
CHECKPOINT_MAGIC = b"SLCK"
FORMAT_VERSION = 1

# magic, version, W, H, L, n_sequences, radius, speed_min, speed_max, seed, label_dim
_DATASET_HEADER = struct.Struct("<4sIIIIIdddqI")
# magic, version, header_json_length
_CHECKPOINT_PREFIX = struct.Struct("<4sII")


def atomic_write_bytes(path, data):
    """Write bytes to ``path`` via a temp file + rename, so readers never see
    a partial file and failures leave no stray artifact."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path):
    """Hex SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_key(payload):
    """Hex SHA-256 of a JSON-serializable payload in canonical form."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dataset_payload_nbytes(width, height, seq_len, n_sequences, label_dim):
    """Payload size implied by a dataset header (header itself excluded)."""
    return n_sequences * seq_len * (width * height + label_dim) * 4


def dataset_file_nbytes(width, height, seq_len, n_sequences, label_dim):
    return _DATASET_HEADER.size + dataset_payload_nbytes(
        width, height, seq_len, n_sequences, label_dim
    )


def write_dataset(dataset, path):
    """Serialize a Dataset; per sequence: L frames (row-major f32) then L labels."""
    w, h = dataset.arena
    header = _DATASET_HEADER.pack(
        DATASET_MAGIC,
        FORMAT_VERSION,
        w,
        h,
        dataset.seq_len,
        dataset.n_sequences,
        dataset.radius,
        dataset.speed_range[0],
        dataset.speed_range[1],
        dataset.seed,
        dataset.label_dim,
    )
    frames = np.ascontiguousarray(dataset.frames, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype="<f4")
    parts = [header]
    for i in range(dataset.n_sequences):
        parts.append(frames[i].tobytes())
        parts.append(labels[i].tobytes())
    atomic_write_bytes(path, b"".join(parts))


def read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _DATASET_HEADER.size:
        raise FormatError(f"{path}: too short for a dataset header")
    magic, version, w, h, seq_len, n_sequences, radius, s_min, s_max, seed, label_dim = (
        _DATASET_HEADER.unpack_from(blob)
    )
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset format version {version}")
    expected = dataset_payload_nbytes(w, h, seq_len, n_sequences, label_dim)
    payload = blob[_DATASET_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    frame_bytes = seq_len * h * w * 4
    label_bytes = seq_len * label_dim * 4
    stride = frame_bytes + label_bytes
    frames = np.empty((n_sequences, seq_len, h, w), dtype=np.float32)
    labels = np.empty((n_sequences, seq_len, label_dim), dtype=np.float32)
    for i in range(n_sequences):
        base = i * stride
        frames[i] = np.frombuffer(
            payload, dtype="<f4", count=seq_len * h * w, offset=base
        ).reshape(seq_len, h, w)
        labels[i] = np.frombuffer(
            payload, dtype="<f4", count=seq_len * label_dim, offset=base + frame_bytes
        ).reshape(seq_len, label_dim)
    return Dataset(
        frames=frames,
        labels=labels,
        arena=(w, h),
        radius=radius,
        speed_range=(s_min, s_max),
        seed=seed,
    )


def _net_description(name, net):
    return {
        "name": name,
        "layers": [
            {
                "in_dim": layer.weight.shape[1],
                "out_dim": layer.weight.shape[0],
                "activation": layer.activation,
            }
            for layer in net.layers
        ],
    }


def _net_payload(net):
    chunks = []
    for layer in net.layers:
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return b"".join(chunks)


def _net_from_payload(desc, payload, offset):
    layers = []
    for spec in desc["layers"]:
        n_in, n_out = int(spec["in_dim"]), int(spec["out_dim"])
        w_count = n_out * n_in
        weight = np.frombuffer(payload, dtype="<f8", count=w_count, offset=offset)
        offset += w_count * 8
        bias = np.frombuffer(payload, dtype="<f8", count=n_out, offset=offset)
        offset += n_out * 8
        layers.append(
            nn.Layer(
                weight.reshape(n_out, n_in).astype(np.float64),
                bias.astype(np.float64),
                spec["activation"],
            )
        )
    return nn.DenseNet(layers), offset


def _write_checkpoint_blob(header_dict, nets, path):
    header_json = json.dumps(header_dict, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(_net_payload(net) for net in nets)
    prefix = _CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, len(header_json))
    atomic_write_bytes(path, prefix + header_json + payload)


def _read_checkpoint_blob(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _CHECKPOINT_PREFIX.size:
        raise FormatError(f"{path}: too short for a checkpoint header")
    magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version {version}")
    header_end = _CHECKPOINT_PREFIX.size + header_len
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header")
    header = json.loads(blob[_CHECKPOINT_PREFIX.size:header_end].decode())
    payload = blob[header_end:]
    expected = 0
    for desc in header["nets"]:
        for spec in desc["layers"]:
            expected += (spec["in_dim"] * spec["out_dim"] + spec["out_dim"]) * 8
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, architecture implies {expected}"
        )
    return header, payload


def _loss_log_to_json(loss_log):
    return [
        {
            "epoch": s.epoch,
            "reconstruction": s.reconstruction,
            "kl_prior": s.kl_prior,
            "kl_similarity": s.kl_similarity,
            "total": s.total,
            "n_clamped": s.n_clamped,
        }
        for s in loss_log
    ]


def _loss_log_from_json(rows):
    return [
        training.EpochStats(
            int(r["epoch"]),
            float(r["reconstruction"]),
            float(r["kl_prior"]),
            float(r["kl_similarity"]),
            float(r["total"]),
            int(r["n_clamped"]),
        )
        for r in rows
    ]


def write_model_checkpoint(checkpoint, path):
    model = checkpoint.model
    header = {
        "kind": "representation",
        "nets": [
            _net_description("encoder", model.encoder),
            _net_description("decoder", model.decoder),
        ],
        "latent_dim": model.latent_dim,
        "frame_height": model.frame_shape[0],
        "frame_width": model.frame_shape[1],
        "config": checkpoint.config.to_dict(),
        "final_epoch": checkpoint.final_epoch,
        "loss_log": _loss_log_to_json(checkpoint.loss_log),
    }
    _write_checkpoint_blob(header, [model.encoder, model.decoder], path)


def read_model_checkpoint(path):
    header, payload = _read_checkpoint_blob(path)
    if header.get("kind") != "representation":
        raise FormatError(f"{path}: not a representation checkpoint")
    encoder, offset = _net_from_payload(header["nets"][0], payload, 0)
    decoder, _ = _net_from_payload(header["nets"][1], payload, offset)
    model = vae.VaeModel(
        encoder,
        decoder,
        int(header["latent_dim"]),
        (int(header["frame_height"]), int(header["frame_width"])),
    )
    config = training.TrainConfig.from_dict(header["config"])
    return training.Checkpoint(model, config, _loss_log_from_json(header["loss_log"]))


def write_head_checkpoint(head, head_config, path, extra=None):
    header = {
        "kind": "downstream_head",
        "nets": [_net_description("head", head.net)],
        "latent_dim": head.latent_dim,
        "subset_fraction": head.subset_fraction,
        "n_examples": head.n_examples,
        "seed": head.seed,
        "config": head_config.to_dict(),
        "loss_log": [float(v) for v in head.loss_log],
    }
    if extra:
        header["extra"] = extra
    _write_checkpoint_blob(header, [head.net], path)


def read_head_checkpoint(path):
    header, payload = _read_checkpoint_blob(path)
    if header.get("kind") != "downstream_head":
        raise FormatError(f"{path}: not a downstream-head checkpoint")
    net, _ = _net_from_payload(header["nets"][0], payload, 0)
    head = training.DownstreamHead(
        net=net,
        latent_dim=int(header["latent_dim"]),
        subset_fraction=float(header["subset_fraction"]),
        n_examples=int(header["n_examples"]),
        seed=int(header["seed"]),
        loss_log=[float(v) for v in header["loss_log"]],
    )
    config = training.HeadConfig.from_dict(header["config"])
    return head, config, header.get("extra", {})


def write_loss_log_csv(loss_log, path):
    lines = ["epoch,reconstruction,kl_prior,kl_similarity,total"]
    for s in loss_log:
        lines.append(
            f"{s.epoch},{s.reconstruction!r},{s.kl_prior!r},{s.kl_similarity!r},{s.total!r}"
        )
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
