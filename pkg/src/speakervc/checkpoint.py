"""Checkpoint container: a directory with ``manifest.json`` and one binary file per component.

Component file layout: one JSON header line (tensor names, shapes and
component metadata) followed by every tensor as a flat little-endian float32
array, in header order.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .adaptor import MelAdaptor
from .audio import MelConfig
from .decoders import DecoderModel, VCSystem
from .nn_utils import freeze
from .speaker import SpeakerEncoder
from .units import UnitCodebook, UnitProjection

FORMAT = "svc-ckpt-v1"
COMPONENTS = ("codebook", "projection", "speaker", "adaptor", "decoder")


class MissingComponentError(FileNotFoundError):
    pass


class CheckpointError(ValueError):
    pass


def _encode(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    header = {"format": FORMAT, "meta": meta,
              "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]}
    body = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in tensors.values())
    return json.dumps(header, sort_keys=True).encode() + b"\n" + body


def _decode(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    head, _, body = raw.partition(b"\n")
    header = json.loads(head)
    if header.get("format") != FORMAT:
        raise CheckpointError(f"unsupported component format {header.get('format')!r}")
    flat = np.frombuffer(body, dtype="<f4")
    tensors, pos = {}, 0
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"], dtype=np.int64))
        tensors[spec["name"]] = flat[pos:pos + n].reshape(spec["shape"]).copy()
        pos += n
    if pos != flat.size:
        raise CheckpointError("component body size does not match its header")
    return tensors, header["meta"]


def _state(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})


# ---------------------------------------------------------------------------
# per-component codecs


def pack(name: str, obj) -> bytes:
    if name == "codebook":
        return _encode({"centroids": obj.centroids}, {"inertia_history": list(obj.inertia_history)})
    if name == "projection":
        return _encode({"weight": obj.weight, "bias": obj.bias},
                       {"frontend_digest": obj.frontend_digest, "loss_history": list(obj.loss_history),
                        "accuracy_history": list(obj.accuracy_history)})
    if name == "speaker":
        meta = {"n_mels": obj.frames[0].in_channels, "channels": obj.frames[0].out_channels,
                "embed_dim": obj.embed_dim, "n_speakers": len(obj.speakers), "speakers": obj.speakers,
                "mel_config": obj.mel_config.to_dict(), "accuracy_history": obj.accuracy_history,
                "loss_history": obj.loss_history}
        return _encode(_state(obj), meta)
    if name == "adaptor":
        meta = {"src": obj.src_config.to_dict(), "dst": obj.dst_config.to_dict(),
                "loss_history": list(getattr(obj, "loss_history", []))}
        return _encode({} if obj.bypass else _state(obj), meta)
    if name == "decoder":
        meta = {"variant": obj.variant, "use_spk": obj.use_spk, "k": obj.k, "spk_dim": obj.spk_dim,
                "style_dim": obj.style_dim, "hidden": obj.hidden, "layers": obj.layers, "n_mels": obj.n_mels,
                "stages_done": obj.stages_done, "history": {str(k): v for k, v in obj.history.items()}}
        return _encode(_state(obj), meta)
    raise ValueError(f"unknown component {name!r}")


def unpack(name: str, raw: bytes):
    tensors, meta = _decode(raw)
    if name == "codebook":
        return UnitCodebook(tensors["centroids"].astype(np.float64), tuple(meta["inertia_history"]))
    if name == "projection":
        return UnitProjection(tensors["weight"].astype(np.float64), tensors["bias"].astype(np.float64),
                              meta["frontend_digest"], tuple(meta["loss_history"]), tuple(meta["accuracy_history"]))
    if name == "speaker":
        m = SpeakerEncoder(meta["n_mels"], meta["channels"], meta["embed_dim"], meta["n_speakers"],
                           MelConfig.from_dict(meta["mel_config"]))
        _load_state(m, tensors)
        m.speakers = list(meta["speakers"])
        m.accuracy_history = list(meta["accuracy_history"])
        m.loss_history = list(meta["loss_history"])
        return freeze(m)
    if name == "adaptor":
        m = MelAdaptor(MelConfig.from_dict(meta["src"]), MelConfig.from_dict(meta["dst"]))
        if not m.bypass:
            _load_state(m, tensors)
        m.loss_history = list(meta["loss_history"])
        return freeze(m)
    if name == "decoder":
        m = DecoderModel(meta["variant"], meta["k"], meta["spk_dim"], meta["use_spk"], meta["hidden"],
                         meta["layers"], meta["style_dim"], meta["n_mels"])
        _load_state(m, tensors)
        m.stages_done = list(meta["stages_done"])
        m.history = {int(k): v for k, v in meta["history"].items()}
        return freeze(m)
    raise ValueError(f"unknown component {name!r}")


# ---------------------------------------------------------------------------
# directory container


def _manifest_path(ckpt_dir) -> Path:
    return Path(ckpt_dir) / "manifest.json"


def read_manifest(ckpt_dir) -> dict:
    p = _manifest_path(ckpt_dir)
    if not p.exists():
        return {"format": FORMAT, "components": {}}
    manifest = json.loads(p.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def save_component(ckpt_dir, name: str, obj, file_name: str | None = None) -> str:
    """Write one component and register it in the manifest; returns its sha256."""
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    raw = pack(name.split(":")[0], obj)
    file_name = file_name or f"{name.replace(':', '_')}.bin"
    (d / file_name).write_bytes(raw)
    digest = hashlib.sha256(raw).hexdigest()
    manifest = read_manifest(d)
    manifest["components"][name] = {"file": file_name, "sha256": digest}
    _manifest_path(d).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return digest


def load_component(ckpt_dir, name: str):
    manifest = read_manifest(ckpt_dir)
    entry = manifest["components"].get(name)
    if entry is None:
        raise MissingComponentError(f"checkpoint {ckpt_dir} has no component {name!r}")
    path = Path(ckpt_dir) / entry["file"]
    if not path.exists():
        raise MissingComponentError(f"component file missing: {path}")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
        raise CheckpointError(f"checksum mismatch for component {name!r}")
    return unpack(name.split(":")[0], raw)


def has_component(ckpt_dir, name: str) -> bool:
    return name in read_manifest(ckpt_dir)["components"]


def component_hashes(ckpt_dir) -> dict[str, str]:
    return {k: v["sha256"] for k, v in sorted(read_manifest(ckpt_dir)["components"].items())}


def decoder_key(variant: str, use_spk: bool = True) -> str:
    return f"decoder:{variant}" + ("" if use_spk else "-nospk")


def load_system(ckpt_dir, variant: str = "speakervc", use_spk: bool = True) -> VCSystem:
    return VCSystem(
        codebook=load_component(ckpt_dir, "codebook"),
        projection=load_component(ckpt_dir, "projection"),
        spk_encoder=load_component(ckpt_dir, "speaker"),
        adaptor=load_component(ckpt_dir, "adaptor"),
        decoder=load_component(ckpt_dir, decoder_key(variant, use_spk)),
    )
