"""Evaluation orchestrator: runs the protocol over a held-out set and builds the report.

Manipulation stage, for every domain (its bit flipped on each test mask) and
both modes (latent, reference):
1. Translate: K outputs per input (latent codes or K random references).
2. Attributes: provider scores of the outputs vs the target bit -> AP, F1, PR curve.
3. Cycle: map outputs back with the source style -> mIoU against the input.
4. Pose: provider angles of outputs vs inputs -> per-angle RMSE.
5. FID between embeddings of real test masks and outputs; diversity over the K outputs.

Synthesis stage, per mode: K renders per mask -> FID against real images and
diversity; each test image rebuilt from its own style gives L1, PSNR, SSIM and
RMSE. Variants without the encoder report the latent mode only.

Returns: dict with keys report (DataFrame, REPORT_COLUMNS), steps, diagnostics,
curves (PR curves keyed by (manipulation, attribute)) and dumps (the embeddings
behind each FID cell).
"""
from __future__ import annotations
import math
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from .audit import log_event
from .config import Config, EvaluationConfig
from .guardrails import ProviderError, UsageError
from .ingest import Sample, collate
from .manipulation import ManipNetworks, cycle_reconstruct, translate
from .metrics import (REPORT_COLUMNS, ap_f1, diversity, fid, gaussian_stats, miou, pose_rmse, pr_curve, psnr, rmse,
                      ssim)
from .providers import resolve_provider
from .synthesis import SynthNetworks, reconstruct
from .toy_data import AttributeRule
from .tracing import span

FIDELITY_COLUMNS = ("recon_l1", "psnr", "ssim", "rmse")
TranslateFn = Callable[..., torch.Tensor]


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


class EvaluationOrchestrator:
    def __init__(self, config: Config, nets, test_set: Sequence[Sample],
                 eval_config: EvaluationConfig | None = None,
                 translate_fn: Optional[TranslateFn] = None,
                 cycle_fn: Optional[TranslateFn] = None):
        self.config = config
        self.nets = nets
        self.test_set = list(test_set)
        self.eval_config = eval_config or config.evaluation
        if self.eval_config.num_samples < 2:
            raise UsageError("evaluation needs at least 2 samples per input for diversity")
        if len(self.test_set) < 2:
            raise UsageError("evaluation needs at least 2 test samples")
        self.translate_fn = translate_fn or self._translate
        self.cycle_fn = cycle_fn or self._cycle
        self.embed = resolve_provider("embedding", self.eval_config.embedding, seed=self.eval_config.seed)
        self.distance = resolve_provider("distance", self.eval_config.distance)
        if config.stage == "manipulation":
            self.attributes = resolve_provider("attributes", self.eval_config.attributes,
                                               **self._attribute_kwargs())
            self.pose = resolve_provider("pose", self.eval_config.pose)

    def _attribute_kwargs(self) -> Dict[str, Any]:
        if self.eval_config.attributes != "toy_oracle":
            return {}
        if self.config.dataset.kind != "toy":
            raise ProviderError("attributes:toy_oracle", "only available for toy datasets")
        toy = self.config.dataset.toy
        return {"rules": [AttributeRule(r.name, r.region, r.shape, r.presence) for r in toy.rules],
                "min_pixels": toy.min_pixels}

    def _translate(self, x, target, mode, reference=None, z=None) -> torch.Tensor:
        nets: ManipNetworks = self.nets
        out = []
        for sl in _chunks(x.shape[0], self.eval_config.batch_size):
            out.append(translate(nets, x[sl], target[sl], mode=mode,
                                 reference=None if reference is None else reference[sl],
                                 z=None if z is None else z[sl]))
        return torch.cat(out)

    def _cycle(self, x, y_real, x_fake) -> torch.Tensor:
        return torch.cat([cycle_reconstruct(self.nets, x[sl], y_real[sl], x_fake[sl])
                          for sl in _chunks(x.shape[0], self.eval_config.batch_size)])

    def _fid(self, real, fake) -> tuple[float, Dict[str, np.ndarray]]:
        real_feats = self.embed(real)
        fake_feats = self.embed(fake[: self.eval_config.fid_samples])
        return fid(gaussian_stats(real_feats), gaussian_stats(fake_feats)), {"real": real_feats, "fake": fake_feats}

    def _evaluate_manipulation(self, steps: List[Dict[str, Any]], dumps: Dict, curves: Dict) -> List[Dict[str, Any]]:
        ec = self.eval_config
        batch = collate(self.test_set)
        masks, labels, ids = batch.masks, batch.labels, batch.ids
        n, K = masks.shape[0], ec.num_samples
        ref_pose = self.pose(masks, ids)
        rows = []
        for d, domain in enumerate(self.config.model.domain_names):
            targets = labels.clone()
            targets[:, d] = 1 - targets[:, d]
            for m, mode in enumerate(ec.modes):
                with span("evaluate.step", {"manipulation": domain, "mode": mode}):
                    gen = torch.Generator().manual_seed(ec.seed * 1000 + d * 10 + m)
                    pick = np.random.default_rng([ec.seed, d, m])
                    outputs, cycles = [], []
                    for _ in range(K):
                        reference = z = None
                        if mode == "reference":
                            reference = masks[torch.from_numpy(pick.integers(0, n, n))]
                        else:
                            z = torch.randn(n, self.config.model.latent_dim, generator=gen)
                        out = self.translate_fn(masks, targets, mode, reference=reference, z=z)
                        outputs.append(out)
                        cycles.append(self.cycle_fn(masks, labels, out))
                    scores = np.concatenate([self.attributes(out)[:, d] for out in outputs])
                    truths = np.tile(targets[:, d].numpy(), K)
                    ap, f1 = ap_f1(scores, truths)
                    curves[(f"{domain}_{mode}", domain)] = pr_curve(scores, truths)
                    miou_value = float(np.mean([miou(cyc[j], masks[j]) for cyc in cycles for j in range(n)]))
                    pred = pd.concat([self.pose(out, [f"{i}#{k}" for i in ids]) for k, out in enumerate(outputs)])
                    ref = pd.concat([ref_pose.assign(id=[f"{i}#{k}" for i in ids]) for k in range(K)])
                    rmse = pose_rmse(pred, ref)
                    fid_value, dumps[(domain, mode)] = self._fid(masks, torch.cat(outputs))
                    div_mean, div_std = diversity([[out[j] for out in outputs] for j in range(n)], self.distance)
                    row = {"manipulation": domain, "mode": mode, "roll_rmse": rmse["roll"],
                           "pitch_rmse": rmse["pitch"], "yaw_rmse": rmse["yaw"],
                           "ap": math.nan if ap is None else ap, "f1": f1, "miou": miou_value, "fid": fid_value,
                           "diversity_mean": div_mean, "diversity_std": div_std,
                           **dict.fromkeys(FIDELITY_COLUMNS, math.nan)}
                    rows.append(row)
                    steps.append({"name": f"{domain}/{mode}", "outputs": n * K})
                    log_event("evaluate_step", row)
        return rows

    def _reference_fidelity(self, images: torch.Tensor, masks: torch.Tensor) -> Dict[str, float]:
        """Reconstruct every test image from its own style; L1, PSNR, SSIM and RMSE against the input."""
        ec = self.eval_config
        l1, per_image = [], {"psnr": [], "ssim": [], "rmse": []}
        with torch.no_grad():
            for sl in _chunks(images.shape[0], ec.batch_size):
                x = images[sl]
                fake = reconstruct(self.nets, x, masks[sl], seed=ec.seed)
                l1.append(float(torch.mean(torch.abs(x - fake))))
                for name, metric in (("psnr", psnr), ("ssim", ssim), ("rmse", rmse)):
                    per_image[name].append(metric(x, fake))
        out = {"recon_l1": float(np.mean(l1))}
        out.update({name: float(torch.cat(values).mean()) for name, values in per_image.items()})
        return out

    def _evaluate_synthesis(self, steps: List[Dict[str, Any]], dumps: Dict) -> List[Dict[str, Any]]:
        ec = self.eval_config
        nets: SynthNetworks = self.nets
        batch = collate(self.test_set)
        if batch.images is None:
            raise UsageError("synthesis evaluation needs RGB test images")
        masks, images = batch.masks, batch.images
        n, K = masks.shape[0], ec.num_samples
        with_encoder = self.config.model.synthesis_variant == "full"
        fidelity = dict.fromkeys(FIDELITY_COLUMNS, math.nan)
        if with_encoder:
            fidelity = self._reference_fidelity(images, masks)
        rows = []
        for m, mode in enumerate(ec.modes):
            if mode == "reference" and not with_encoder:
                continue
            with span("evaluate.step", {"manipulation": "synthesis", "mode": mode}):
                gen = torch.Generator().manual_seed(ec.seed * 1000 + m)
                pick = np.random.default_rng([ec.seed, m])
                outputs = []
                with torch.no_grad():
                    for _ in range(K):
                        if mode == "reference":
                            idx = torch.from_numpy(pick.integers(0, n, n))
                            sm = torch.cat([nets.synth_encode(images[idx][sl], masks[idx][sl])
                                            for sl in _chunks(n, ec.batch_size)])
                        else:
                            sm = nets.synth_map(nets.sample_code(n, gen))
                        noise = nets.generator.make_noise(n, gen)
                        outputs.append(torch.cat([
                            nets.synth_generate(masks[sl], sm[sl], noise=[f[sl] for f in noise], clamp=True)
                            for sl in _chunks(n, ec.batch_size)]))
                fid_value, dumps[("synthesis", mode)] = self._fid(images, torch.cat(outputs))
                div_mean, div_std = diversity([[out[j] for out in outputs] for j in range(n)], self.distance)
                row = {"manipulation": "synthesis", "mode": mode, "roll_rmse": math.nan, "pitch_rmse": math.nan,
                       "yaw_rmse": math.nan, "ap": math.nan, "f1": math.nan, "miou": math.nan, "fid": fid_value,
                       "diversity_mean": div_mean, "diversity_std": div_std, **fidelity}
                rows.append(row)
                steps.append({"name": f"synthesis/{mode}", "outputs": n * K})
                log_event("evaluate_step", row)
        return rows

    def run(self) -> Dict[str, Any]:
        with span("evaluate.run", {"stage": self.config.stage, "samples": len(self.test_set)}):
            steps: List[Dict[str, Any]] = []
            dumps: Dict[Any, Dict[str, np.ndarray]] = {}
            curves: Dict[Any, Optional[pd.DataFrame]] = {}
            if self.config.stage == "manipulation":
                rows = self._evaluate_manipulation(steps, dumps, curves)
            else:
                rows = self._evaluate_synthesis(steps, dumps)
            report = pd.DataFrame(rows, columns=REPORT_COLUMNS)
            diagnostics = {
                "rows": len(report),
                "inputs": len(self.test_set),
                "num_samples": self.eval_config.num_samples,
                "absent_ap": int(report["ap"].isna().sum()) if self.config.stage == "manipulation" else 0,
            }
            log_event("evaluate_complete", diagnostics)
            return {"report": report, "steps": steps, "diagnostics": diagnostics, "curves": curves, "dumps": dumps}
