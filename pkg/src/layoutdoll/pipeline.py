"""End-to-end orchestration: corpus -> autoencoder -> diffusion -> checkpoint,
plus the condition-resolution glue shared by the CLI and the HTTP service."""

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import IMAGE, TEXT, load_manifest, load_sample
from .diffusion import (
    ConditionBundle,
    DiffusionTrainer,
    GeneratorModel,
    TrainConfig,
    load_state,
    make_schedule,
    prepare_bundle,
    sample,
    save_state,
)
from .encoders import AutoencoderConfig, encode_images, latent_scale, train_autoencoder
from .errors import ContractViolation
from .layout import LayoutSpec, rasterize
from .metrics import (
    MetricReport,
    detect_components,
    frechet_distance,
    kernel_mmd,
    spatial_accuracy,
    ssim,
    toy_features,
)
from .unet import DenoiserConfig

NONE = "NONE"


class ConditionConflict(ContractViolation):
    """A component was given both a sentence and a reference crop without a
    drop entry to pick one."""

    def __init__(self, component):
        super().__init__(f"component {component!r} has both text and reference "
                         "conditions; add a drop entry to choose one")
        self.component = component


@dataclass
class PipelineConfig:
    ae: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    den: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    timesteps: int = 1000
    schedule: str = "cosine"


def desk_config(seed=0):
    """The configuration used by the acceptance runs at 64x96."""
    return PipelineConfig(
        ae=AutoencoderConfig(channels=(32, 64, 96), steps=1800, batch_size=8,
                             learning_rate=2e-3, seed=seed),
        den=DenoiserConfig(base_channels=40, second_mid_block=False),
        train=TrainConfig(seed=seed, batch_size=16, learning_rate=1e-3),
    )


def micro_config(seed=0):
    """Tiny configuration for fast unit tests."""
    return PipelineConfig(
        ae=AutoencoderConfig(channels=(8, 16, 24), steps=30, batch_size=4,
                             learning_rate=2e-3, seed=seed),
        den=DenoiserConfig(base_channels=16, second_mid_block=False),
        train=TrainConfig(seed=seed, batch_size=4, learning_rate=1e-3),
        timesteps=100,
    )


def train_pipeline(manifest_path, out_path, total_steps, cfg: PipelineConfig = None,
                   resume=None, log=None):
    """Train (or resume) the full stack on a corpus manifest and write the
    checkpoint. Returns (model, ae_curve, diffusion_curve)."""
    records = load_manifest(manifest_path)
    if not records:
        raise ContractViolation(f"empty corpus manifest {manifest_path}")
    samples = [load_sample(r) for r in records]
    images = [s.image for s in samples]

    if resume is not None:
        model, opt_state, meta = load_state(resume)
        tcfg = TrainConfig(**meta["extra"]["train_cfg"])
        trainer = DiffusionTrainer(model, samples, tcfg, opt_state=opt_state)
        ae_curve = []
        if log:
            log(f"resumed at diffusion step {model.params.step_count}")
    else:
        cfg = cfg or desk_config()
        tcfg = cfg.train
        params, ae, ae_curve = train_autoencoder(images, cfg.ae, log=log)
        params.step_count = 0  # the counter now tracks diffusion steps only
        scale = latent_scale(encode_images(ae, images[:256]))
        sched = make_schedule(cfg.timesteps, cfg.schedule)
        model = GeneratorModel(params, cfg.ae, cfg.den, sched, scale,
                               rng=np.random.default_rng((tcfg.seed, 4)))
        trainer = DiffusionTrainer(model, samples, tcfg)
    curve = trainer.train(total_steps, log=log)
    save_state(out_path, model, trainer.opt,
               extra={"train_cfg": asdict(tcfg), "corpus_n": len(samples)})
    return model, ae_curve, curve


# ---------------------------------------------------------------------------
# condition resolution
# ---------------------------------------------------------------------------

def resolve_drop(layout_spec: LayoutSpec, texts, refs, explicit=None):
    """Decide each layout component's modality: TEXT, IMAGE, or NONE.

    A component with both a sentence and a crop and no explicit drop entry is
    a conflict. Conditions for components absent from the layout are
    rejected so requests stay unambiguous.
    """
    comps = layout_spec.components()
    for key in list(texts) + list(refs) + list(explicit or {}):
        if key not in comps:
            raise ContractViolation(
                f"condition given for component {key!r} absent from the layout")
    drop = {}
    for comp in comps:
        has_text = comp in texts
        has_ref = comp in refs
        choice = (explicit or {}).get(comp)
        if choice is not None:
            if choice not in (TEXT, IMAGE, NONE):
                raise ContractViolation(f"drop[{comp!r}] must be TEXT, IMAGE or NONE")
            if choice == TEXT and not has_text:
                raise ContractViolation(f"drop picks TEXT for {comp!r} but no sentence given")
            if choice == IMAGE and not has_ref:
                raise ContractViolation(f"drop picks IMAGE for {comp!r} but no reference given")
            drop[comp] = choice
        elif has_text and has_ref:
            raise ConditionConflict(comp)
        elif has_text:
            drop[comp] = TEXT
        elif has_ref:
            drop[comp] = IMAGE
        else:
            drop[comp] = NONE
    return drop


def generate(model: GeneratorModel, layout_spec, texts, refs, drop=None,
             seed=0, steps=50, guidance_scale=3.0, use_ca=True):
    """Resolve conditions, build the bundle, and run the sampler once."""
    effective = resolve_drop(layout_spec, texts, refs, drop)
    bundle = prepare_bundle(model, layout_spec, texts, refs, effective)
    images, _ = sample(model, [bundle], [seed], steps=steps,
                       guidance_scale=guidance_scale, use_ca=use_ca)
    return images[0], effective


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_sets(generated, layout_specs, reference_images=None):
    """MetricReport over a generated set and its layouts.

    Spatial accuracy uses the color-oracle detector against rasterized layout
    masks; SSIM compares each image with its rasterized layout. Fréchet/MMD
    compare toy features of the generated set against `reference_images`
    when given, else against the rasterized layouts.
    """
    from .dataset import DETECTION_PALETTE
    from .layout import masks_from_layout

    if len(generated) != len(layout_specs):
        raise ContractViolation("generated and layout lists differ in length")
    if not generated:
        raise ContractViolation("nothing to evaluate")
    sa_vals, ssim_vals, rasters = [], [], []
    for img, spec in zip(generated, layout_specs):
        raster = rasterize(spec)
        rasters.append(raster)
        masks = masks_from_layout(raster)
        det = detect_components(img, DETECTION_PALETTE)
        sa_vals.append(spatial_accuracy(det, masks))
        ssim_vals.append(ssim(img, raster))
    feats_gen = toy_features(generated)
    feats_ref = toy_features(reference_images if reference_images else rasters)
    if len(generated) >= 2 and len(feats_ref) >= 2:
        fid = frechet_distance(feats_gen, feats_ref)
        kid = kernel_mmd(feats_gen, feats_ref)
    else:
        fid, kid = float("nan"), float("nan")
    return MetricReport(
        spatial_accuracy=float(np.mean(sa_vals)),
        ssim=float(np.mean(ssim_vals)),
        fid=fid, kid=kid, n=len(generated))
