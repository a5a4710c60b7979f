# precheck.py - sanity checks before a batch, an evaluation or a training run
# better to report every bad file up front than fail halfway through a batch
#
# each check returns (errors, warnings) as readable strings, ensure_ok raises

from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from hazeforge.imgcore import PlanarImage
from hazeforge.metrics import WIN_SIZE
from hazeforge.models import LossConfig, TrainConfig

Check = Tuple[List[str], List[str]]


class PrecheckError(ValueError):
    pass


def precheck_inputs(paths: Sequence[Path]) -> Check:
    errors = []
    warnings = []
    if not paths:
        errors.append("No input images given.")
    # unreadable files are reported per file by the batch itself
    seen = {}
    for p in paths:
        p = Path(p)
        if p.stem in seen:
            errors.append(f"Inputs '{seen[p.stem]}' and '{p}' would write the same output '{p.stem}.png'.")
        seen[p.stem] = p
    return errors, warnings


def precheck_training(images: Sequence[Tuple[str, PlanarImage]], tcfg: TrainConfig,
                      lcfg: LossConfig | None = None) -> Check:
    errors = []
    warnings = []
    if not images:
        errors.append("Training folder has no hazy images.")
        return errors, warnings

    for name, img in images:
        if img.channels != 3:
            errors.append(f"Image '{name}' has {img.channels} channel(s), training needs RGB.")
        if min(img.height, img.width) < tcfg.crop:
            errors.append(
                f"Image '{name}' is {img.width}x{img.height}, "
                f"smaller than the {tcfg.crop}px training crop."
            )
    # the ssim term needs a full window inside every crop
    if lcfg is not None and lcfg.lambda_ssim > 0 and tcfg.crop < WIN_SIZE:
        errors.append(
            f"Training crop {tcfg.crop}px is smaller than the {WIN_SIZE}x{WIN_SIZE} ssim window; "
            f"use a larger crop or set loss.lambda_ssim=0."
        )
    if tcfg.batch > len(images):
        warnings.append(
            f"batch ({tcfg.batch}) is bigger than the number of images ({len(images)}); "
            f"images will repeat within a step."
        )
    if tcfg.lr == 0:
        warnings.append("lr is 0, weights will not change.")
    return errors, warnings


def precheck_pairs(pred_names: Iterable[str], ref_names: Iterable[str]) -> Check:
    errors = []
    warnings = []
    pred, ref = set(pred_names), set(ref_names)
    only_pred = sorted(pred - ref)
    only_ref = sorted(ref - pred)
    if only_pred:
        errors.append(f"No reference for: {only_pred}")
    if only_ref:
        errors.append(f"No prediction for: {only_ref}")
    if not pred & ref:
        errors.append("No image pairs to evaluate.")
    return errors, warnings


def ensure_ok(check: Check) -> List[str]:
    """Raise PrecheckError on errors, otherwise hand back the warnings."""
    errors, warnings = check
    if errors:
        raise PrecheckError("; ".join(errors))
    return warnings
