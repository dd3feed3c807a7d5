"""Command-line driver: one subcommand per pipeline stage, all paths under --workdir."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np
import torch
from PIL import Image

from . import backbone, evalkit, frzoo, pipeline, synthface
from .checkpoint import load_checkpoint, save_checkpoint, update_manifest
from .config import ConfigError, Layout, MissingArtifactError, RunConfig, load_config
from .encryptor import IdProjector
from .mmic import ImageSemanticHead, TextEncoder, save_vocabulary

logger = logging.getLogger("privportrait")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
DEGREE_SWEEP = (0.0, 0.25, 0.5, 1.0, 2.0)
STAGE2_SWEEP = (0, 10, 20, 30, 40, 50)


# ---------------------------------------------------------------------------
# artifact loading
# ---------------------------------------------------------------------------


def load_split(layout: Layout, split: str) -> list:
    path = layout.corpus(split)
    layout.require(os.path.join(path, "metadata.csv"), f"{split} corpus (run `corpus`)")
    return synthface.load_corpus(path)


def load_fr(layout: Layout, name: str, calibrated: bool = False) -> frzoo.FRModel:
    path = layout.require(layout.fr_model(name) if name != "semantic" else layout.semantic,
                          f"FR model {name} (run `train-fr`)")
    model = frzoo.FRModel.load(path)
    if calibrated and model.threshold_far01 is None:
        raise MissingArtifactError(f"calibration missing for {name} (run `calibrate`)")
    return model


def load_codec(layout: Layout, mode: str) -> backbone.LatentCodec:
    if mode == "pixel":
        return backbone.LatentCodec("pixel")
    ae = backbone.load_autoencoder(layout.require(layout.autoencoder, "autoencoder checkpoint (run `pretrain`)"))
    return backbone.LatentCodec("autoencoder", ae)


def load_models(layout: Layout, cfg: RunConfig, projector: bool = True, calibrated: bool = False) -> pipeline.ModelBundle:
    mode = cfg.latent_mode
    den_path = layout.require(layout.denoiser(mode), "backbone checkpoint")
    den, _ = backbone.load_denoiser(den_path)
    semantic = load_fr(layout, "semantic")
    text_state, _ = load_checkpoint(layout.require(layout.text_encoder(mode), "backbone checkpoint"))
    head_state, _ = load_checkpoint(layout.require(layout.image_head(mode), "backbone checkpoint"))
    text_enc = TextEncoder()
    text_enc.load_state_dict(text_state)
    head = ImageSemanticHead(semantic.net.feature_dim)
    head.load_state_dict(head_state)
    zoo = [load_fr(layout, name, calibrated) for name, _, _ in cfg.zoo_entries]
    proj = None
    if projector:
        proj = IdProjector.load(layout.require(layout.projector(mode), "projector checkpoint (run `train-projector`)"))
    return pipeline.ModelBundle(backbone.NoiseSchedule.cosine(), load_codec(layout, mode), den,
                                backbone.freeze(text_enc), backbone.freeze(head), semantic, zoo,
                                cfg.surrogate_names, cfg.blackbox_names, proj)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_corpus(layout: Layout, cfg: RunConfig, args) -> None:
    n, seed = cfg.corpus_identities, cfg.corpus_seed
    splits = {
        "train": synthface.make_corpus(n, cfg.corpus_samples, seed),
        "heldout": synthface.make_corpus(n, cfg.heldout_samples, cfg.heldout_seed, identity_seed=seed),
        "bench": synthface.make_corpus(n, cfg.bench_samples, cfg.bench_seed, identity_seed=seed),
    }
    for split, corpus in splits.items():
        synthface.save_corpus(corpus, layout.corpus(split))
        logger.info("wrote %s corpus: %d samples", split, len(corpus))
    acc = synthface.nearest_centroid_accuracy(splits["train"], splits["heldout"])
    logger.info("nearest-centroid pixel accuracy on held-out samples: %.4f", acc)
    save_vocabulary(layout.path("vocabulary.txt"))
    cfg.snapshot(layout.corpus(""), "config.snapshot")


def cmd_train_fr(layout: Layout, cfg: RunConfig, args) -> None:
    train = load_split(layout, "train")
    heldout = load_split(layout, "heldout")
    jobs = [("semantic", cfg.semantic_arch, cfg.semantic_seed, 1.0)]
    jobs += [(name, arch, seed, 0.0) for name, arch, seed in cfg.zoo_entries]
    if args.model:
        jobs = [j for j in jobs if j[0] in args.model]
        if not jobs:
            raise ConfigError(f"unknown model names {args.model}")
    for name, arch, seed, attr_w in jobs:
        t0 = time.time()
        model = frzoo.train_fr(train, arch, seed, name=name, heldout=heldout, epochs=cfg.fr_epochs,
                               attribute_weight=attr_w, min_accuracy=cfg.fr_min_accuracy)
        model.save(layout.semantic if name == "semantic" else layout.fr_model(name))
        logger.info("trained %s (%s) in %.0fs", name, arch, time.time() - t0)
    cfg.snapshot(layout.path("models"))


def calibration_pairs(corpus, n_pairs: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array([s.attrs.identity_id for s in corpus])
    pairs = frzoo.sample_impostor_pairs(ids, n_pairs, np.random.default_rng(seed))
    images = synthface.stack_images(corpus)
    return images[pairs[:, 0]], images[pairs[:, 1]]


def cmd_calibrate(layout: Layout, cfg: RunConfig, args) -> None:
    heldout = load_split(layout, "heldout")
    a, b = calibration_pairs(heldout, cfg.calib_pairs, cfg.eval_seed)
    for name, _, _ in cfg.zoo_entries:
        model = load_fr(layout, name)
        thr = frzoo.calibrate_far(model, (a, b), cfg.far)
        update_manifest(layout.fr_model(name), threshold_far01=thr, far=cfg.far, calibration_pairs=len(a))
        logger.info("%s threshold %.4f", name, thr)
    cfg.snapshot(layout.path("models"), "calibration.snapshot")


def cmd_pretrain(layout: Layout, cfg: RunConfig, args) -> None:
    train = load_split(layout, "train")
    semantic = load_fr(layout, "semantic")
    mode = cfg.latent_mode
    codec = backbone.LatentCodec("pixel")
    if mode == "autoencoder":
        if not os.path.exists(layout.autoencoder):
            images = frzoo.to_tensor(synthface.stack_images(train))
            ae = backbone.train_autoencoder(images, cfg.pretrain_seed, steps=cfg.ae_steps)
            backbone.save_autoencoder(layout.autoencoder, ae, {"seed": cfg.pretrain_seed})
        codec = load_codec(layout, mode)
        heldout = frzoo.to_tensor(synthface.stack_images(load_split(layout, "heldout")))
        with torch.no_grad():
            rec = codec.decode(codec.encode(heldout))
        mse = float(((rec - heldout) ** 2).mean())
        logger.info("autoencoder held-out PSNR %.2f dB", 10 * np.log10(1 / mse))
    pc = backbone.PretrainConfig(steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch)
    res = backbone.pretrain_backbone(train, backbone.NoiseSchedule.cosine(), pc, cfg.pretrain_seed, semantic, codec)
    manifest = {"seed": cfg.pretrain_seed, "steps": pc.steps, "latent_mode": mode, "stats": res.stats,
                "final_loss": float(np.mean(res.losses[-200:]))}
    backbone.save_denoiser(layout.denoiser(mode), res.denoiser, manifest)
    save_checkpoint(layout.text_encoder(mode), res.text_encoder.state_dict(), dict(manifest, kind="text_encoder"))
    save_checkpoint(layout.image_head(mode), res.image_head.state_dict(), dict(manifest, kind="image_head"))
    np.savetxt(os.path.join(layout.backbone_dir(mode), "loss.csv"), np.asarray(res.losses), fmt="%.6f")
    cfg.snapshot(layout.backbone_dir(mode))


def cmd_train_projector(layout: Layout, cfg: RunConfig, args) -> None:
    models = load_models(layout, cfg, projector=False)
    train = load_split(layout, "train")
    pc = pipeline.ProjectorTrainConfig(epochs=cfg.projector_epochs, batch_size=cfg.projector_batch,
                                      image_drop=cfg.projector_image_drop, lr=cfg.projector_lr,
                                      max_timestep=cfg.projector_max_timestep)
    res = pipeline.train_projector(train, models, pc, cfg.projector_seed)
    path = layout.projector(cfg.latent_mode)
    res.projector.save(path, {"seed": cfg.projector_seed, "epochs": pc.epochs, "epoch_losses": res.epoch_losses,
                              "stats": res.stats, "frozen_checksums": res.checksums_after})
    cfg.snapshot(os.path.dirname(path))


def _read_image(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingArtifactError(f"input image missing: {path}")
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_result(result: pipeline.GenerationResult, out_dir: str, stem: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    image_file, trace_file = f"{stem}.png", f"{stem}_trace.csv"
    Image.fromarray(synthface.to_uint8(result.adversarial)).save(os.path.join(out_dir, image_file))
    result.trace.write_csv(os.path.join(out_dir, trace_file))
    return {"image": image_file, "trace": trace_file, "seed": result.seed, "description": result.description,
            "conditions_used": result.conditions_used}


def cmd_protect(layout: Layout, cfg: RunConfig, args) -> None:
    original, target = _read_image(args.original), _read_image(args.target)
    models = load_models(layout, cfg, projector=cfg.lambda_id != 0)
    pc = cfg.protection()
    pipeline.check_prompt(args.prompt)
    result = pipeline.generate(original, target, args.prompt, pc, models)
    out = args.out or layout.path("protect")
    entry = write_result(result, out, "adversarial")
    manifest = {"config": pipeline.config_snapshot(pc), "prompt": args.prompt, "original": args.original,
                "target": args.target, "model_checksums": models.checksums(), "outputs": [entry]}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    cfg.snapshot(out)
    print(os.path.join(out, entry["image"]))


def _protocol(cfg: RunConfig, bench) -> evalkit.VerificationProtocol:
    return evalkit.build_verification_protocol(bench, cfg.eval_groups, cfg.eval_pairs, cfg.surrogate_names,
                                               cfg.blackbox_names, cfg.eval_seed)


def _evaluate_cell(models, bench, protocol, pc, label, out_dir, chunk, identification=None):
    report, results = evalkit.run_protocol(protocol, bench, pc, models, label, identification, chunk)
    os.makedirs(out_dir, exist_ok=True)
    stem = label.replace("/", "_")
    report.to_json(os.path.join(out_dir, f"{stem}.json"))
    ok = [r for r in results if isinstance(r, pipeline.GenerationResult)]
    pairs = protocol.pairs[:8]
    if len(ok) >= len(pairs):
        rows = [np.stack([bench[p.source].image for p in pairs]), np.stack([r.adversarial for r in ok[:8]]),
                np.stack([bench[p.target].image for p in pairs])]
        evalkit.save_montage(rows, os.path.join(out_dir, f"{stem}_montage.png"))
    logger.info("%s: black-box ASR %.3f, white-box ASR %.3f, SSIM %.3f, PSNR %.2f", label, report.blackbox_average,
                report.whitebox_average, report.ssim, report.psnr)
    return report


def cmd_evaluate(layout: Layout, cfg: RunConfig, args) -> None:
    models = load_models(layout, cfg, calibrated=True)
    bench = load_split(layout, "bench")
    protocol = _protocol(cfg, bench)
    ident = evalkit.build_identification_protocol(bench, cfg.eval_seed) if args.identification else None
    out = args.out or layout.path("runs", "evaluate")
    report = _evaluate_cell(models, bench, protocol, cfg.protection(), "full", out, cfg.chunk, ident)
    names = cfg.blackbox_names + cfg.surrogate_names
    evalkit.write_report_table([report], os.path.join(out, "report.csv"), names)
    cfg.snapshot(out)


def ablation_cells(cfg: RunConfig, only: list[str] | None = None) -> list[tuple[str, str, pipeline.ProtectionConfig]]:
    """(sweep, label, config) for every ablation cell."""
    base = cfg.protection()
    cells = []
    if not only or "components" in only:
        cells += [("components", "w/o-encryptor", base.without_encryptor()),
                  ("components", "w/o-enhancer", base.without_enhancer()),
                  ("components", "full", base)]
    if not only or "degree" in only:
        cells += [("degree", f"degree-{k:g}", base.scaled(k)) for k in DEGREE_SWEEP]
    if not only or "stage2" in only:
        cells += [("stage2", f"stage2-{t}", dataclasses.replace(base, stage2_step=t))
                  for t in STAGE2_SWEEP if t <= base.steps]
    return cells


def cmd_ablate(layout: Layout, cfg: RunConfig, args) -> None:
    models = load_models(layout, cfg, calibrated=True)
    bench = load_split(layout, "bench")
    protocol = _protocol(cfg, bench)
    out = args.out or layout.path("runs", "ablate")
    reports = []
    for sweep, label, pc in ablation_cells(cfg, args.only):
        reports.append(_evaluate_cell(models, bench, protocol, pc, label, os.path.join(out, sweep), cfg.chunk))
    evalkit.write_report_table(reports, os.path.join(out, "ablation.csv"), cfg.blackbox_names + cfg.surrogate_names)
    cfg.snapshot(out)


def cmd_build_all(layout: Layout, cfg: RunConfig, args) -> None:
    """Run every training stage whose artifact is missing."""
    args.model = None
    stages = [
        (os.path.join(layout.corpus("bench"), "metadata.csv"), cmd_corpus),
        (layout.fr_model(cfg.zoo_entries[-1][0]), cmd_train_fr),
        (None, cmd_calibrate),
        (layout.denoiser(cfg.latent_mode), cmd_pretrain),
        (layout.projector(cfg.latent_mode), cmd_train_projector),
    ]
    for path, fn in stages:
        if path is None:
            if any(frzoo.FRModel.load(layout.fr_model(n)).threshold_far01 is None for n, _, _ in cfg.zoo_entries):
                fn(layout, cfg, args)
        elif not os.path.exists(path):
            logger.info("running %s", fn.__name__)
            fn(layout, cfg, args)


COMMANDS = {
    "corpus": cmd_corpus,
    "train-fr": cmd_train_fr,
    "calibrate": cmd_calibrate,
    "pretrain": cmd_pretrain,
    "train-projector": cmd_train_projector,
    "protect": cmd_protect,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "build-all": cmd_build_all,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default="work", help="artifact root directory")
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--alpha", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--lambda-s", dest="lambda_s", type=float)
    common.add_argument("--lambda-id", dest="lambda_id", type=float)
    common.add_argument("--no-enhancer", action="store_true")
    common.add_argument("--seed", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--stage2-step", dest="stage2_step", type=int)
    common.add_argument("--cfg-scale", dest="cfg_scale", type=float)
    common.add_argument("--latent-mode", dest="latent_mode", choices=("pixel", "autoencoder"))
    common.add_argument("--far", type=float)
    common.add_argument("--calib-pairs", dest="calib_pairs", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="privportrait", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "train-fr":
            p.add_argument("--model", action="append", help="train only this model (repeatable)")
        if name == "protect":
            p.add_argument("--original", required=True)
            p.add_argument("--target", required=True)
            p.add_argument("--prompt", required=True)
            p.add_argument("--out")
        if name in ("evaluate", "ablate"):
            p.add_argument("--out")
        if name == "evaluate":
            p.add_argument("--identification", action="store_true", help="also score Rank-1/Rank-5 identification")
        if name == "ablate":
            p.add_argument("--only", action="append", choices=("components", "degree", "stage2"))
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("alpha", "beta", "lambda_s", "lambda_id", "seed", "steps", "stage2_step", "cfg_scale",
                "latent_mode", "far", "calib_pairs", "jobs"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.no_enhancer:
        overrides["enhancer"] = False
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.jobs))
        layout = Layout(args.workdir)
        COMMANDS[args.command](layout, cfg, args)
    except (ConfigError, pipeline.VocabularyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # runtime failure
        logger.exception("command %s failed", args.command)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
