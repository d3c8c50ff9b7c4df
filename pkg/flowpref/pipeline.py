"""Stage orchestration against an output directory.

gen-data -> pretrain -> (quality filter) -> sft -> candidates -> scores ->
pairs -> dpo -> eval. Every stage reads its inputs from files and writes new
files; inputs are never modified.
"""

import json
import logging
import os
import time
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .binio import append_line, atomic_write
from .cfm import Stage, TrainConfig, train
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .conditioning import ConditionEncoder, Prompt, prompt_for_example
from .config import RunConfig
from .data import (
    Dataset,
    Example,
    LatentSeq,
    MixtureMode,
    MixtureSpec,
    align_evenly,
    assign_mode,
    make_mixture_dataset,
    read_dataset,
    tokenize_lyrics,
    with_alignments,
    write_dataset,
)
from .errors import InputError
from .metrics import EMBEDDERS, BinGrid, append_report, compare, rtf
from .preference import (
    SCORE_BINS,
    DpoConfig,
    PreferencePair,
    dpo_train,
    filter_dataset,
    mine_pairs,
    read_pairs,
    score_distribution,
    write_pairs,
)
from .sampler import SampleConfig, euler_sample_batch
from .scorers import (
    ModeAffinityScorer,
    Scorer,
    ScoreSource,
    WeightedScorer,
    score_batch,
    score_sample,
)
from .vectorfield import FieldDims, init_params

logger = logging.getLogger(__name__)

ABLATION_AXES = ("gap", "epochs", "winner", "stage")
ABLATION_GAPS = (0.0, 0.4, 0.8)
ABLATION_EPOCHS = (4, 8, 12)
ABLATION_WINNERS = ("generated", "ground-truth")

HELDOUT_SEED_OFFSET = 1
SAMPLE_CHUNK = 64
# share of the wide 1-10 judge when scoring sequences with lyrics
VOCAL_BLEND = 0.5


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


class Pipeline:
    """Runs pipeline stages for one RunConfig inside `out_dir`."""

    def __init__(self, cfg: RunConfig, out_dir: str, verbose: bool = True):
        self.cfg = cfg
        self.out_dir = out_dir
        self.verbose = verbose

    def path(self, name: str) -> str:
        """Path of `name` inside the output directory."""
        return os.path.join(self.out_dir, name)

    def _say(self, message: str) -> None:
        if self.verbose:
            print(message)

    # -- building blocks ------------------------------------------------------

    def mixture_spec(self) -> MixtureSpec:
        cfg = self.cfg
        modes = [
            MixtureMode(tuple(mean), stdev, weight)
            for mean, stdev, weight in zip(
                cfg.mode_means, cfg.mode_stdevs, cfg.mode_weights
            )
        ]
        return MixtureSpec(modes, cfg.seq_len, cfg.latent_dim, cfg.frame_rate)

    def field_dims(self) -> FieldDims:
        cfg = self.cfg
        return FieldDims(
            cfg.latent_dim, cfg.style_dim, cfg.lyric_dim, cfg.hidden, cfg.layers
        )

    def encoder(self) -> ConditionEncoder:
        cfg = self.cfg
        return ConditionEncoder.create(
            cfg.latent_dim,
            cfg.style_dim,
            cfg.lyric_dim,
            cfg.tag_vocab,
            cfg.token_vocab,
            cfg.seed,
        )

    def scorer(self) -> Scorer:
        cfg = self.cfg
        target = self.mixture_spec().means()[cfg.target_mode]
        return ModeAffinityScorer(target, cfg.scorer_sigma, cfg.scorer_source)

    def quality_scorers(self) -> Tuple[Scorer, Scorer]:
        """(with lyrics, instrumental) judges for the SFT quality filter.

        Instrumentals get a 1-10 judge twice as wide as the main scorer;
        sequences with lyrics get a blend of that judge and the main scorer.
        """
        cfg = self.cfg
        target = self.mixture_spec().means()[cfg.target_mode]
        instrumental = ModeAffinityScorer(
            target, 2.0 * cfg.scorer_sigma, ScoreSource.INSTRUMENTAL_LIKE
        )
        vocal = WeightedScorer(
            [(self.scorer(), 1.0 - VOCAL_BLEND), (instrumental, VOCAL_BLEND)]
        )
        return vocal, instrumental

    def grid(self) -> BinGrid:
        return BinGrid(self.cfg.grid_low, self.cfg.grid_high, self.cfg.grid_bins)

    def train_config(self, stage: Stage) -> TrainConfig:
        cfg = self.cfg
        sft = stage is Stage.SFT
        return TrainConfig(
            stage=stage,
            lr=cfg.sft_lr if sft else cfg.pretrain_lr,
            epochs=cfg.sft_epochs if sft else cfg.epochs,
            batch_size=cfg.batch_size,
            dropout=cfg.dropout,
            seed=cfg.seed,
            max_len=cfg.sft_max_len if sft else cfg.pretrain_max_len,
            max_steps=cfg.max_steps,
            prompt_modality=cfg.prompt_modality,
            jitter=cfg.jitter,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            weight_decay=cfg.weight_decay,
            eps=cfg.eps,
            ema_decay=cfg.ema_decay,
            ema_interval=cfg.ema_interval,
            shards=cfg.shards,
            workers=cfg.workers,
            log_path=self.path("train_log.tsv"),
        )

    def dpo_config(self) -> DpoConfig:
        cfg = self.cfg
        return DpoConfig(
            beta=cfg.beta,
            gap=cfg.gap,
            winner_floor=cfg.winner_floor,
            epochs=cfg.dpo_epochs,
            lr=cfg.dpo_lr,
            batch_size=cfg.dpo_batch_size,
            seed=cfg.seed,
            candidates=cfg.candidates,
            winner_source=cfg.winner_source,
            error_weighting=cfg.error_weighting,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            weight_decay=cfg.weight_decay,
            eps=cfg.eps,
            ema_decay=cfg.ema_decay,
            ema_interval=cfg.ema_interval,
            shards=cfg.shards,
            workers=cfg.workers,
            log_path=self.path("train_log.tsv"),
        )

    def sample_config(self, seed: Optional[int] = None) -> SampleConfig:
        cfg = self.cfg
        return SampleConfig(
            cfg.sample_steps,
            cfg.cfg_scale,
            cfg.seed if seed is None else seed,
            cfg.use_ema,
        )

    def load_dataset(self, path: str, heldout: bool = False) -> Dataset:
        """Read a DRPD file and re-attach its seeded lyric alignments."""
        seed = self.cfg.seed + (HELDOUT_SEED_OFFSET if heldout else 0)
        return with_alignments(
            read_dataset(path), seed, self.cfg.tokens_per_seq, self.cfg.token_vocab
        )

    def prompts(
        self, dataset: Dataset, count: int, salt: int
    ) -> List[Tuple[Prompt, Example]]:
        """The first `count` examples of a seeded shuffle, turned into prompts."""
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, salt]))
        order = rng.permutation(len(dataset))[:count]
        prompts = []
        for index in order:
            example = dataset[int(index)]
            style = prompt_for_example(
                example, self.cfg.prompt_modality, rng, self.cfg.tag_vocab
            )
            prompts.append((Prompt(style, example.alignment), example))
        return prompts

    def generate(
        self,
        checkpoint: Checkpoint,
        prompts: Sequence[Prompt],
        seeds: Sequence[int],
        sample_cfg: Optional[SampleConfig] = None,
    ) -> List[LatentSeq]:
        """One sample per (prompt, seed), sampled in chunks."""
        sample_cfg = sample_cfg or self.sample_config()
        theta = checkpoint.sampling_params(sample_cfg.use_ema)
        encoder = checkpoint.encoder
        conditions = [encoder.encode_prompt(p, self.cfg.seq_len) for p in prompts]

        samples: List[LatentSeq] = []
        chunks = range(0, len(conditions), SAMPLE_CHUNK)
        quiet = None if self.verbose else True
        for start in tqdm(chunks, desc="sample", disable=quiet):
            stop = start + SAMPLE_CHUNK
            samples.extend(
                euler_sample_batch(
                    theta,
                    conditions[start:stop],
                    sample_cfg,
                    seeds[start:stop],
                    frame_rate=self.cfg.frame_rate,
                )
            )
        return samples

    # -- stages ---------------------------------------------------------------

    def gen_data(self) -> Tuple[str, str]:
        cfg = self.cfg
        spec = self.mixture_spec()
        self._say(
            f"🔧 Generating {cfg.n_train} training + "
            f"{cfg.n_heldout} held-out sequences"
        )
        train_set = make_mixture_dataset(
            spec, cfg.n_train, cfg.seed, cfg.tokens_per_seq, cfg.token_vocab
        )
        heldout = make_mixture_dataset(
            spec,
            cfg.n_heldout,
            cfg.seed + HELDOUT_SEED_OFFSET,
            cfg.tokens_per_seq,
            cfg.token_vocab,
        )
        train_path, heldout_path = self.path("dataset.drpd"), self.path("heldout.drpd")
        write_dataset(train_set.latents, train_path, train_set.labels)
        write_dataset(heldout.latents, heldout_path, heldout.labels)
        self._say(f"📄 Wrote {train_path} and {heldout_path}")
        return train_path, heldout_path

    def train(
        self,
        stage: Stage,
        checkpoint_in: Optional[str] = None,
        dataset_path: Optional[str] = None,
    ) -> str:
        cfg = self.cfg
        stage = Stage(stage)
        train_cfg = self.train_config(stage)
        dataset = self.load_dataset(dataset_path or self.path("dataset.drpd"))

        if checkpoint_in is None and stage is Stage.SFT:
            checkpoint_in = self.path(f"{Stage.PRETRAIN.value}.drpc")
        start: Optional[Checkpoint] = None
        if checkpoint_in is not None:
            start = load_checkpoint(checkpoint_in)

        out_path = self.path(f"{stage.value}.drpc")
        if train_cfg.epochs == 0 and start is not None:
            self._say("⚠️  0 epochs: the output checkpoint equals the input")
            save_checkpoint(start, out_path)
            return out_path

        if stage is Stage.SFT:
            vocal, instrumental = self.quality_scorers()
            dataset = filter_dataset(
                dataset, instrumental, cfg.sft_threshold, vocal_scorer=vocal
            )
            self._say(f"🔧 Quality filter kept {len(dataset)} sequences")
            if len(dataset) == 0:
                raise InputError(
                    f"no sequences score >= {cfg.sft_threshold}; lower sft_threshold"
                )

        if start is not None:
            theta0, encoder = start.params, start.encoder
        else:
            theta0, encoder = init_params(self.field_dims(), cfg.seed), self.encoder()

        self._say(
            f"📡 {stage.value}: {train_cfg.epochs} epochs on {len(dataset)} sequences"
        )
        checkpoint = train(
            train_cfg, dataset, theta0, encoder, cfg.to_dict(), progress=self.verbose
        )
        save_checkpoint(checkpoint, out_path)
        self._say(f"✅ Saved {out_path}")
        return out_path

    def sample(
        self,
        checkpoint_in: str,
        prompt_path: Optional[str] = None,
        out_name: str = "samples.drpd",
        lyrics: Optional[str] = None,
    ) -> str:
        """Sample one sequence per held-out prompt; reports RTF to timing.jsonl.

        With `lyrics`, every prompt sings that text with evenly spaced tokens
        instead of its example's alignment.
        """
        cfg = self.cfg
        checkpoint = load_checkpoint(checkpoint_in)
        reference = self.load_dataset(
            prompt_path or self.path("heldout.drpd"), heldout=prompt_path is None
        )
        prompts = [p for p, _ in self.prompts(reference, cfg.eval_samples, salt=7)]
        if lyrics is not None:
            alignment = align_evenly(tokenize_lyrics(lyrics), cfg.seq_len)
            prompts = [replace(p, alignment=alignment) for p in prompts]
        seeds = [_derived_seed(cfg.seed, 11, i) for i in range(len(prompts))]

        self._say(f"📡 Sampling {len(prompts)} sequences, {cfg.sample_steps} steps")
        started = time.perf_counter()
        samples = self.generate(checkpoint, prompts, seeds)
        elapsed = time.perf_counter() - started

        out_path = self.path(out_name)
        write_dataset(samples, out_path)
        value = rtf(elapsed, sum(s.length for s in samples), cfg.frame_rate)
        timing = {"metric": "rtf", "value": value, "n": len(samples)}
        append_report(self.path("timing.jsonl"), [timing])
        self._say(f"✅ Wrote {out_path} (RTF {value:.4f})")
        return out_path

    def evaluate(self, samples_path: str, reference_path: str) -> List[Dict[str, Any]]:
        generated = read_dataset(samples_path).latents
        reference = read_dataset(reference_path).latents
        rows: List[Dict[str, Any]] = list(
            compare(generated, reference, self.grid(), EMBEDDERS[self.cfg.embedder])
        )
        scores = [score_sample(self.scorer(), x).value for x in generated]
        distribution = score_distribution(scores)
        rows.append(
            {"metric": "score_mean", "value": distribution["mean"], "n": len(scores)}
        )
        rows.append(
            {
                "metric": "target_mode_rate",
                "value": self.mode_rate(generated),
                "n": len(generated),
            }
        )
        append_report(self.path("eval.jsonl"), rows)
        for row in rows:
            self._say(f"📄 {row['metric']}: {row['value']:.6g}")
        return rows

    def mode_rate(self, samples: Sequence[LatentSeq]) -> float:
        """Fraction of samples nearest the scorer's target mode."""
        means = self.mixture_spec().means()
        hits = sum(assign_mode(x, means) == self.cfg.target_mode for x in samples)
        return hits / len(samples)

    def mine(
        self,
        checkpoint: Checkpoint,
        dataset: Dataset,
        dpo_cfg: Optional[DpoConfig] = None,
    ) -> Tuple[List[PreferencePair], List[float]]:
        """Generate candidates per prompt, score them and keep passing pairs."""
        cfg = self.cfg
        dpo_cfg = dpo_cfg or self.dpo_config()
        scorer = self.scorer()
        prompt_examples = self.prompts(dataset, cfg.n_prompts, salt=13)

        flat_prompts = []
        seeds = []
        for index, (prompt, _) in enumerate(prompt_examples):
            for k in range(dpo_cfg.candidates):
                flat_prompts.append(prompt)
                seeds.append(_derived_seed(cfg.seed, 17, index, k))
        candidates = self.generate(checkpoint, flat_prompts, seeds)

        pairs = []
        all_scores: List[float] = []
        for index, (prompt, example) in enumerate(prompt_examples):
            k = dpo_cfg.candidates
            block = candidates[index * k : (index + 1) * k]
            scored = [(x, score) for _, x, score in score_batch(scorer, block, prompt)]
            all_scores.extend(score.value for _, score in scored)
            if len(scored) < 2:
                continue
            ground_truth = None
            if dpo_cfg.winner_source == "ground-truth":
                truth = example.latent
                ground_truth = (truth, score_sample(scorer, truth, prompt))
            pair = mine_pairs(scored, prompt, dpo_cfg, ground_truth)
            if pair is not None:
                pairs.append(pair)

        logger.info("mined %d pairs from %d prompts", len(pairs), len(prompt_examples))
        return pairs, all_scores

    def dpo(
        self,
        checkpoint_in: str,
        pairs_path: Optional[str] = None,
        dataset_path: Optional[str] = None,
    ) -> str:
        """Mine pairs (unless a pair store is given) and run DPO."""
        checkpoint = load_checkpoint(checkpoint_in)
        dpo_cfg = self.dpo_config()
        if pairs_path is not None:
            pairs = read_pairs(pairs_path)
        else:
            dataset = self.load_dataset(dataset_path or self.path("dataset.drpd"))
            self._say(f"📥 Mining pairs from {self.cfg.n_prompts} prompts")
            pairs, scores = self.mine(checkpoint, dataset, dpo_cfg)
            write_pairs(pairs, self.path("pairs.drpp"))
            row = score_distribution(scores)
            self._say(
                f"📄 {len(pairs)} pairs; candidate mean score {row['mean']:.3f}, "
                f"[3-5] {row['3-5']:.1f}%"
            )

        self._say(f"📡 DPO: {dpo_cfg.epochs} epochs on {len(pairs)} pairs")
        result = dpo_train(
            dpo_cfg, pairs, checkpoint, self.cfg.to_dict(), progress=self.verbose
        )
        out_path = self.path("dpo.drpc")
        save_checkpoint(result, out_path)
        self._say(f"✅ Saved {out_path}")
        return out_path

    def score_row(self, checkpoint: Checkpoint, dataset: Dataset) -> Dict[str, float]:
        """Score distribution of one sample per evaluation prompt."""
        cfg = self.cfg
        prompts = [p for p, _ in self.prompts(dataset, cfg.n_prompts, salt=19)]
        seeds = [_derived_seed(cfg.seed, 23, i) for i in range(len(prompts))]
        samples = self.generate(checkpoint, prompts, seeds)
        scores = [value.value for _, _, value in score_batch(self.scorer(), samples)]
        row = score_distribution(scores)
        row["target_mode_rate"] = self.mode_rate(samples)
        return row

    def ablate(
        self,
        checkpoint_in: str,
        axes: Sequence[str] = ABLATION_AXES,
        dataset_path: Optional[str] = None,
    ) -> List[Dict[str, Any]]:
        """Sweep DPO settings and write one score-distribution row per setting."""
        unknown = [axis for axis in axes if axis not in ABLATION_AXES]
        if unknown:
            raise InputError(f"unknown ablation axes: {', '.join(unknown)}")

        base = load_checkpoint(checkpoint_in)
        dataset = self.load_dataset(dataset_path or self.path("dataset.drpd"))
        heldout_path = self.path("heldout.drpd")
        evaluation = (
            self.load_dataset(heldout_path, heldout=True)
            if os.path.exists(heldout_path)
            else dataset
        )
        base_cfg = self.dpo_config()

        settings: List[Tuple[str, str, Optional[DpoConfig]]] = []
        if "gap" in axes:
            settings += [
                ("gap", f"{g:g}", replace(base_cfg, gap=g)) for g in ABLATION_GAPS
            ]
        if "epochs" in axes:
            settings += [
                ("epochs", str(e), replace(base_cfg, epochs=e)) for e in ABLATION_EPOCHS
            ]
        if "winner" in axes:
            settings += [
                ("winner", w, replace(base_cfg, winner_source=w))
                for w in ABLATION_WINNERS
            ]
        if "stage" in axes:
            settings += [("stage", "pre-dpo", None), ("stage", "post-dpo", base_cfg)]

        rows: List[Dict[str, Any]] = []
        pair_cache: Dict[Tuple[float, str], List[PreferencePair]] = {}
        for axis, value, dpo_cfg in settings:
            self._say(f"📡 Ablation {axis}={value}")
            if dpo_cfg is None:
                checkpoint = base
                n_pairs = 0
            else:
                key = (dpo_cfg.gap, dpo_cfg.winner_source)
                if key not in pair_cache:
                    pair_cache[key], _ = self.mine(base, dataset, dpo_cfg)
                pairs = pair_cache[key]
                checkpoint = dpo_train(dpo_cfg, pairs, base, self.cfg.to_dict())
                n_pairs = len(pairs)
            row: Dict[str, Any] = {"axis": axis, "setting": value, "pairs": n_pairs}
            row.update(self.score_row(checkpoint, evaluation))
            rows.append(row)

        self._write_ablation(rows)
        return rows

    def _write_ablation(self, rows: List[Dict[str, Any]]) -> None:
        jsonl_path = self.path("ablation.jsonl")
        tsv_path = self.path("ablation.tsv")
        columns = ["axis", "setting", "pairs", "n"]
        columns += list(SCORE_BINS) + ["mean", "3-5", "target_mode_rate"]

        lines = ["\t".join(columns)]
        for row in rows:
            lines.append("\t".join(_cell(row[c]) for c in columns))
        atomic_write(tsv_path, ("\n".join(lines) + "\n").encode("utf-8"))

        records = "".join(json.dumps(row) + "\n" for row in rows)
        atomic_write(jsonl_path, records.encode("utf-8"))

        by_gap = {r["setting"]: r["mean"] for r in rows if r["axis"] == "gap"}
        if "0.4" in by_gap and "0.8" in by_gap:
            holds = by_gap["0.4"] >= by_gap["0.8"]
            append_line(
                jsonl_path,
                json.dumps({"check": "gap 0.4 >= gap 0.8", "holds": bool(holds)}),
            )
            self._say(f"{'✅' if holds else '⚠️ '} gap 0.4 >= gap 0.8: {holds}")
        self._say(f"📄 Wrote {tsv_path} and {jsonl_path}")


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)
