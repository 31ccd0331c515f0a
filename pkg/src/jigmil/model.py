"""Model assembly: parameter containers per variant, tape-level forward
passes, and the versioned binary model container."""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from . import encoder, jigsaw, pooling
from .config import TrainConfig, config_from_dict, config_to_dict
from .errors import ConfigError, FormatError

MODEL_MAGIC = b"JIGMDL01"
MODEL_FORMAT_VERSION = 1

# salts for the independent per-purpose rng streams under (seed, fold)
RS_INIT_ENCODER = 0
RS_INIT_POOL = 1
RS_INIT_AUX = 2
RS_SHUFFLE = 3
RS_MASK = 4
RS_CORRUPT = 5


def stream(cfg_seed, fold, salt, *extra):
    """Independent deterministic generator for one purpose.

    Separate streams ensure that optional components (e.g. the jigsaw head)
    never perturb the draws of the components every variant shares.
    """
    return np.random.default_rng([cfg_seed, fold, salt, *extra])


@dataclass
class Model:
    """All learnable parameters for one variant, plus its configuration."""

    config: TrainConfig
    d1: int
    gat_layers: list  # list[GatLayerParams] or None
    mlp: object  # MlpParams or None
    pool: object  # PoolParams
    jigsaw_head: object  # JigsawHeadParams or None
    discriminator: object  # DiscriminatorParams or None

    @property
    def uses_graph(self):
        return self.config.model_variant.startswith("graph")

    @property
    def uses_attention(self):
        return self.config.model_variant != "graph-mil"

    def named_params(self):
        """Flat name -> array view of every learnable tensor."""
        out = {}
        if self.gat_layers is not None:
            for i, layer in enumerate(self.gat_layers):
                out[f"encoder.{i}.w_g"] = layer.w_g
                out[f"encoder.{i}.v"] = layer.v
        if self.mlp is not None:
            out["encoder.w1"] = self.mlp.w1
            out["encoder.b1"] = self.mlp.b1
            out["encoder.w2"] = self.mlp.w2
            out["encoder.b2"] = self.mlp.b2
        if self.pool.v_att is not None:
            out["pool.v_att"] = self.pool.v_att
            out["pool.mu"] = self.pool.mu
        out["pool.beta"] = self.pool.beta
        out["pool.beta0"] = self.pool.beta0
        if self.jigsaw_head is not None:
            out["aux.w"] = self.jigsaw_head.w
            out["aux.b"] = self.jigsaw_head.b
        if self.discriminator is not None:
            out["disc.w"] = self.discriminator.w
            out["disc.b"] = self.discriminator.b
        return out


def init_model(config, d1, fold=0):
    """Glorot-initialized model for the configured variant."""
    if d1 < 1:
        raise ConfigError(f"d1 must be >= 1, got {d1}")
    cfg = config
    hidden = cfg.gat_hidden
    uses_graph = cfg.model_variant.startswith("graph")

    enc_rng = stream(cfg.seed, fold, RS_INIT_ENCODER)
    if uses_graph:
        gat = encoder.init_gat_params(d1, hidden, cfg.gat_layers, enc_rng)
        mlp = None
    else:
        gat = None
        mlp = encoder.init_mlp_params(d1, hidden, enc_rng)

    pool_rng = stream(cfg.seed, fold, RS_INIT_POOL)
    pool = pooling.init_pool_params(
        hidden, cfg.d4, pool_rng, attention=(cfg.model_variant != "graph-mil")
    )

    head = None
    disc = None
    if cfg.aux_task == "positional":
        head = jigsaw.init_jigsaw_params(
            hidden, cfg.grid_g, stream(cfg.seed, fold, RS_INIT_AUX)
        )
    elif cfg.aux_task == "consistency":
        disc = jigsaw.init_discriminator_params(
            hidden, stream(cfg.seed, fold, RS_INIT_AUX)
        )
    return Model(
        config=cfg, d1=d1, gat_layers=gat, mlp=mlp, pool=pool,
        jigsaw_head=head, discriminator=disc,
    )


def lift_params(tape, model):
    """Leaf every parameter tensor onto a tape; returns name -> Var."""
    return {name: tape.leaf(arr) for name, arr in model.named_params().items()}


def forward_embedding(model, pvars, x, graph):
    """Refined patch embeddings for the configured encoder."""
    if model.uses_graph:
        layers = [
            (pvars[f"encoder.{i}.w_g"], pvars[f"encoder.{i}.v"])
            for i in range(len(model.gat_layers))
        ]
        return encoder.encode(x, graph, layers)
    return encoder.mlp_encode(
        x, pvars["encoder.w1"], pvars["encoder.b1"],
        pvars["encoder.w2"], pvars["encoder.b2"],
    )


def forward_bag(model, pvars, x, graph):
    """Full slide forward: returns (h, attention-or-None, z, p)."""
    h = forward_embedding(model, pvars, x, graph)
    if model.uses_attention:
        a = pooling.abmil_attention(h, pvars["pool.v_att"], pvars["pool.mu"])
        z = pooling.slide_embedding(h, a)
    else:
        a = None
        z = pooling.mean_pool(h)
    p = pooling.classify(z, pvars["pool.beta"], pvars["pool.beta0"])
    return h, a, z, p


def save_model(model, path):
    """Single versioned binary container: magic, JSON header, raw float64."""
    names = sorted(model.named_params())
    params = model.named_params()
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "d1": model.d1,
        "config": config_to_dict(model.config),
        "tensors": [
            {"name": n, "rows": params[n].shape[0], "cols": params[n].shape[1]}
            for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_model(path):
    blob = open(path, "rb").read()
    if len(blob) < 8 or blob[:8] != MODEL_MAGIC:
        raise FormatError(f"bad magic in {path}", offset=0)
    if len(blob) < 12:
        raise FormatError(f"truncated header length in {path}", offset=len(blob))
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise FormatError(f"truncated header in {path}", offset=len(blob))
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model header in {path}: {exc}", offset=12)
    if header.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(
            f"unsupported model format version {header.get('format_version')!r}"
        )
    cfg = config_from_dict(header["config"])
    model = init_model(cfg, header["d1"])
    params = model.named_params()
    expected_names = sorted(params)
    names = [t["name"] for t in header["tensors"]]
    if names != expected_names:
        raise FormatError(
            f"model tensor set {names} does not match variant "
            f"{cfg.model_variant!r} (expected {expected_names})"
        )
    offset = 12 + hlen
    for t in header["tensors"]:
        rows, cols = t["rows"], t["cols"]
        arr = params[t["name"]]
        if arr.shape != (rows, cols):
            raise FormatError(
                f"tensor {t['name']!r} has shape {(rows, cols)}, "
                f"expected {arr.shape}"
            )
        nbytes = rows * cols * 8
        if len(blob) < offset + nbytes:
            raise FormatError(f"truncated tensor data in {path}", offset=offset)
        arr[...] = np.frombuffer(
            blob, dtype="<f8", count=rows * cols, offset=offset
        ).reshape(rows, cols)
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"trailing bytes in {path}", offset=offset)
    return model
