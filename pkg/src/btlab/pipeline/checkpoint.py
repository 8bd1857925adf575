"""Binary checkpoints with a verified manifest.

Layout:

    bytes 0..3    magic ``BTTL``
    bytes 4..7    format version, unsigned 32-bit little-endian
    bytes 8..11   header length H, unsigned 32-bit little-endian
    next H bytes  header JSON (UTF-8, sorted keys)
    remainder     parameter payload

The header carries the caller's config document, the parameter manifest
(name and shape, in payload order), the payload byte count, and a SHA-256
digest of the payload. The payload is the little-endian float32 bytes of
every array concatenated in manifest order, so a round trip is bit-exact
and truncation or corruption is always detected before a model is built.
Files are written atomically (temp file in the target directory, then
rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..corpus import Vocabulary
from ..encoder import ClassifierHead, EncoderConfig, EncoderModel
from ..translator import Seq2SeqConfig, Seq2SeqModel, TranslatorPair

CHECKPOINT_MAGIC = b"BTTL"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sII")  # magic, version, header length


class CheckpointError(ValueError):
    """A checkpoint file that cannot be trusted or does not match."""


def _canonical_json(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_arrays(config: dict, arrays, path) -> None:
    """Write (name, float array) pairs plus a config document to ``path``.

    Manifest order is the order of ``arrays``. The write is atomic: the file
    appears complete or not at all.
    """
    path = Path(path)
    manifest = []
    chunks = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append([name, list(arr.shape)])
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = _canonical_json({
        "config": config,
        "manifest": manifest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    })
    blob = _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header))
    tmp = path.with_name(path.name + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def load_arrays(path, expect_config: dict | None = None):
    """Read a checkpoint back as (config, ordered {name: float32 array}).

    The magic is checked before anything else is read; the payload digest is
    verified before any array is materialized, so a truncated or corrupted
    file never yields a partial model.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise CheckpointError(f"{path}: file too short for a checkpoint")
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}; not a checkpoint")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: format version {version} unsupported "
                                  f"(expected {CHECKPOINT_VERSION})")
        header_bytes = fh.read(header_len)
        if len(header_bytes) < header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise CheckpointError(f"{path}: unreadable header: {err}") from err
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header "
                              f"promises {header['payload_bytes']} (truncated?)")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch; file corrupt")
    config = header["config"]
    if expect_config is not None and _canonical_json(config) != _canonical_json(expect_config):
        raise CheckpointError(f"{path}: embedded config does not match the "
                              "expected config")
    arrays = {}
    offset = 0
    for name, shape in header["manifest"]:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 4
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"{path}: manifest covers {offset} bytes but the "
                              f"payload holds {len(payload)}")
    return config, arrays


def _params_in_order(params) -> list:
    return [(name, t.data) for name, t in params.items()]


def _encoder_config_doc(cfg) -> dict:
    return {"layers": cfg.layers, "d_model": cfg.d_model,
            "n_heads": cfg.n_heads, "d_ff": cfg.d_ff,
            "vocab_size": cfg.vocab_size, "max_positions": cfg.max_positions}


def save_encoder(model: EncoderModel, vocab: Vocabulary, path,
                 extra: dict | None = None) -> None:
    """Persist a pretrained encoder (no classification head)."""
    config = {
        "kind": "encoder",
        "encoder": _encoder_config_doc(model.config),
        "vocab": list(vocab.tokens),
    }
    if extra:
        config["extra"] = extra
    save_arrays(config, _params_in_order(model.params), path)


def load_encoder(path, expect_config: dict | None = None):
    """Rebuild (EncoderModel, Vocabulary, config) from disk."""
    config, arrays = load_arrays(path, expect_config)
    if config.get("kind") != "encoder":
        raise CheckpointError(f"{path}: checkpoint kind "
                              f"{config.get('kind')!r} is not 'encoder'")
    model = EncoderModel.build(EncoderConfig(**config["encoder"]), seed=0)
    try:
        model.params.load_values({n: arrays[n] for n in model.params.names()})
    except KeyError as err:
        raise CheckpointError(f"{path}: manifest is missing parameter {err}") from err
    return model, Vocabulary(config["vocab"]), config


def save_classifier(model: EncoderModel, head: ClassifierHead, vocab: Vocabulary,
                    path, extra: dict | None = None) -> None:
    """Persist a fine-tuned encoder plus classification head."""
    config = {
        "kind": "classifier",
        "encoder": _encoder_config_doc(model.config),
        "classes": int(head.bias.data.shape[0]),
        "vocab": list(vocab.tokens),
    }
    if extra:
        config["extra"] = extra
    arrays = _params_in_order(model.params)
    arrays += [("head." + name, data)
               for name, data in _params_in_order(head.parameters())]
    save_arrays(config, arrays, path)


def load_classifier(path, expect_config: dict | None = None):
    """Rebuild (EncoderModel, ClassifierHead, Vocabulary, config) from disk."""
    config, arrays = load_arrays(path, expect_config)
    if config.get("kind") != "classifier":
        raise CheckpointError(f"{path}: checkpoint kind "
                              f"{config.get('kind')!r} is not 'classifier'")
    enc_cfg = EncoderConfig(**config["encoder"])
    model = EncoderModel.build(enc_cfg, seed=0)
    head = ClassifierHead.build(enc_cfg.d_model, config["classes"], seed=0)
    try:
        model.params.load_values(
            {n: arrays[n] for n in model.params.names()})
        head.parameters().load_values(
            {n: arrays["head." + n] for n in head.parameters().names()})
    except KeyError as err:
        raise CheckpointError(f"{path}: manifest is missing parameter {err}") from err
    vocab = Vocabulary(config["vocab"])
    return model, head, vocab, config


def save_translator(pair: TranslatorPair, path, extra: dict | None = None) -> None:
    """Persist both directions of a trained translator pair."""
    cfg = pair.fwd.config
    config = {
        "kind": "translator",
        "seq2seq": {"vocab_size": cfg.vocab_size, "enc_layers": cfg.enc_layers,
                    "dec_layers": cfg.dec_layers, "d_model": cfg.d_model,
                    "n_heads": cfg.n_heads, "d_ff": cfg.d_ff,
                    "max_src_len": cfg.max_src_len,
                    "max_tgt_len": cfg.max_tgt_len},
        "vocab": list(pair.vocab.tokens),
    }
    if extra:
        config["extra"] = extra
    arrays = [("fwd." + n, d) for n, d in _params_in_order(pair.fwd.params)]
    arrays += [("rev." + n, d) for n, d in _params_in_order(pair.rev.params)]
    save_arrays(config, arrays, path)


def load_translator(path, expect_config: dict | None = None) -> TranslatorPair:
    config, arrays = load_arrays(path, expect_config)
    if config.get("kind") != "translator":
        raise CheckpointError(f"{path}: checkpoint kind "
                              f"{config.get('kind')!r} is not 'translator'")
    cfg = Seq2SeqConfig(**config["seq2seq"])
    fwd = Seq2SeqModel.build(cfg, seed=0, salt=0)
    rev = Seq2SeqModel.build(cfg, seed=0, salt=1)
    try:
        fwd.params.load_values({n: arrays["fwd." + n] for n in fwd.params.names()})
        rev.params.load_values({n: arrays["rev." + n] for n in rev.params.names()})
    except KeyError as err:
        raise CheckpointError(f"{path}: manifest is missing parameter {err}") from err
    return TranslatorPair(fwd=fwd, rev=rev, vocab=Vocabulary(config["vocab"]))
