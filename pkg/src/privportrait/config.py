"""Run configuration (plain key=value files with overrides) and the workdir layout."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    # corpus
    corpus_identities: int = 100
    corpus_samples: int = 16
    corpus_seed: int = 0
    heldout_samples: int = 6
    heldout_seed: int = 1
    bench_samples: int = 4
    bench_seed: int = 2
    # face-recognition zoo: name:architecture:seed entries
    zoo: str = "fr_a:conv2_avg:1,fr_b:conv3_max:2,fr_c:conv4_avg:3,fr_d:conv3_avg:4,fr_e:conv4_max:5"
    surrogates: str = "fr_a,fr_b,fr_c"
    blackbox: str = "fr_d,fr_e"
    semantic_arch: str = "conv3_max64"
    semantic_seed: int = 100
    fr_epochs: int = 20
    fr_min_accuracy: float = 0.8
    far: float = 0.01
    calib_pairs: int = 20000
    # backbone
    pretrain_steps: int = 4000
    pretrain_seed: int = 0
    pretrain_batch: int = 64
    ae_steps: int = 3000
    # projector
    projector_epochs: int = 40
    projector_batch: int = 64
    projector_seed: int = 0
    projector_image_drop: float = 1.0
    projector_lr: float = 3e-3
    projector_max_timestep: int = 600
    # protection
    alpha: float = 1.0
    beta: float = 1.0
    lambda_s: float = 1.0
    lambda_image: float = 1.0
    lambda_id: float = 4.0
    cfg_scale: float = 5.0
    steps: int = 50
    stage2_step: int = 30
    seed: int = 0
    latent_mode: str = "pixel"
    enhancer: bool = True
    # evaluation
    eval_groups: int = 1
    eval_pairs: int = 300
    eval_seed: int = 0
    chunk: int = 100
    jobs: int = 1

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def updated(self, **overrides) -> "RunConfig":
        unknown = sorted(set(overrides) - set(self.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = dataclasses.replace(self, **{k: _coerce(k, v) for k, v in overrides.items()})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.latent_mode not in ("pixel", "autoencoder"):
            raise ConfigError(f"latent_mode must be pixel or autoencoder, got {self.latent_mode!r}")
        if not 0 <= self.stage2_step <= self.steps:
            raise ConfigError(f"stage2_step must lie in [0, steps={self.steps}]")
        if set(self.surrogate_names) & set(self.blackbox_names):
            raise ConfigError("surrogate and black-box models overlap")
        names = {z[0] for z in self.zoo_entries}
        missing = (set(self.surrogate_names) | set(self.blackbox_names)) - names
        if missing:
            raise ConfigError(f"models not in the zoo: {sorted(missing)}")

    @property
    def zoo_entries(self) -> list[tuple[str, str, int]]:
        out = []
        for item in filter(None, (s.strip() for s in self.zoo.split(","))):
            try:
                name, arch, seed = item.split(":")
                out.append((name, arch, int(seed)))
            except ValueError as exc:
                raise ConfigError(f"bad zoo entry {item!r}; expected name:architecture:seed") from exc
        return out

    @property
    def surrogate_names(self) -> list[str]:
        return [s.strip() for s in self.surrogates.split(",") if s.strip()]

    @property
    def blackbox_names(self) -> list[str]:
        return [s.strip() for s in self.blackbox.split(",") if s.strip()]

    def protection(self):
        from .pipeline import ProtectionConfig

        return ProtectionConfig(alpha=self.alpha, beta=self.beta, lambda_s=self.lambda_s,
                                lambda_image=self.lambda_image, lambda_id=self.lambda_id,
                                cfg_scale=self.cfg_scale, steps=self.steps, stage2_step=self.stage2_step,
                                seed=self.seed, latent_mode=self.latent_mode, enhancer=self.enhancer)

    def dumps(self) -> str:
        return "".join(f"{k} = {getattr(self, k)}\n" for k in self.keys())

    def snapshot(self, directory: str, name: str = "config.snapshot") -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, name)
        with open(path, "w") as fh:
            fh.write(self.dumps())
        return path


def _coerce(key: str, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[key]
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if kind == "bool":
            if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(v)
            return v.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(v)
        if kind == "float":
            return float(v)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from exc
    return v


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    values.update(overrides or {})
    return RunConfig().updated(**values)


@dataclass
class Layout:
    """Artifact paths below one workdir root."""

    root: str

    def path(self, *parts: str) -> str:
        return os.path.join(self.root, *parts)

    def corpus(self, split: str) -> str:
        return self.path("corpus", split)

    def fr_model(self, name: str) -> str:
        return self.path("models", f"{name}.npz")

    @property
    def semantic(self) -> str:
        return self.path("models", "semantic.npz")

    def backbone_dir(self, latent_mode: str = "pixel") -> str:
        return self.path("backbone" if latent_mode == "pixel" else "backbone_ae")

    def denoiser(self, latent_mode: str = "pixel") -> str:
        return os.path.join(self.backbone_dir(latent_mode), "denoiser.npz")

    def text_encoder(self, latent_mode: str = "pixel") -> str:
        return os.path.join(self.backbone_dir(latent_mode), "text_encoder.npz")

    def image_head(self, latent_mode: str = "pixel") -> str:
        return os.path.join(self.backbone_dir(latent_mode), "image_head.npz")

    @property
    def autoencoder(self) -> str:
        return self.path("autoencoder", "autoencoder.npz")

    def projector(self, latent_mode: str = "pixel") -> str:
        return self.path("projector" if latent_mode == "pixel" else "projector_ae", "projector.npz")

    def require(self, path: str, stage: str) -> str:
        if not os.path.exists(path):
            raise MissingArtifactError(f"{stage} missing: expected {path}")
        return path
