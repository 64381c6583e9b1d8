"""
Experiment Runner
=================
End-to-end pipeline for one configuration:

    enroll -> synth-corpus -> augment -> train -> watermark -> eval -> session-sim

Each stage is a cached property computed on first use, so a CLI subcommand
runs exactly the stages it needs. Any module error inside a stage is
re-raised as StageError carrying the stage name and the config hash.

Output layout under the output root:

    enroll/      profiles.json, enrollment.csv, <user>/session_<k>.{wav,json}
    corpus/      corpus.csv, eval/clip_<k>.wav
    augment/     pairs.csv (+ train/ and held_out/ manifests when write_audio)
    model/       checkpoint.json, meta.json, loss.csv
    watermark/   patches.csv, patches/<session>_<clip>_<user>.json
    eval/        <condition>_roc.csv, <condition>_summary.json, calibration.json
    sessions/    traces.jsonl, intrusion.json
    report.json
"""

import copy
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..config import SAMPLE_RATE, ExperimentConfig, SessionConfig, config_hash
from ..errors import EarCanError, StageError
from ..auth.session import (
    Phase,
    SessionState,
    initial_login,
    issue_challenge,
    maybe_update_template,
    new_session,
    relogin,
    window_step,
    write_trace,
)
from ..dsp.features import FeatureMatrix, FrameGeometry, deficiency_mask, rtf_features
from ..dsp.signal_core import Signal, derive_seed, white_noise, write_wav
from ..dsp.sounding import ChirpSpec, band_limited_nmse, estimate_ir, exponential_chirp, export_ir
from ..ear.augmentation import (
    Corpus,
    LabeledPair,
    load_wav_corpus,
    make_pairs,
    split_dataset,
    synth_corpus,
    write_manifest,
)
from ..ear.ear_model import (
    EarProfile,
    ImpulseResponse,
    acquire,
    jitter_profile,
    realize_ir,
    sample_population,
    save_profiles,
)
from ..model.embedding import (
    Embedding,
    NetParams,
    embed_all,
    load_checkpoint,
    save_checkpoint,
    train,
)
from ..model.matcher import (
    Template,
    accuracy_at,
    eer,
    far_threshold,
    make_template,
    rates_at,
    score,
    score_matrix,
    write_metrics,
)
from ..watermark.patchwork import (
    WatermarkPatch,
    apply_patch,
    audit_patch,
    compute_ceiling,
    optimize_patch,
)
from .intrusion import GENUINE, IMPOSTER_LOGIN, INSIDER, REPLAY, DELAYED, PatchedProbe, ProbeBank, simulate_intrusion
from .report import CONDITIONS, MetricsReport

logger = logging.getLogger(__name__)

# Seed streams, one per independent source of randomness
_ENROLL, _CORPUS, _AUGMENT, _SPLIT, _TRAIN, _REFERENCE, _TEST, _PROBE_NOISE, _NONCE = range(1, 10)
_EVAL_CORPUS = 99

REFERENCE_RENDERINGS = 2      # noise-reference renderings per enrollment session


def _finite(value: float) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def _split_scores(scores: np.ndarray, owners: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Genuine and imposter scores from a probes x templates matrix."""
    owners = np.asarray(owners)
    genuine = scores[np.arange(len(owners)), owners]
    mask = np.ones_like(scores, dtype=bool)
    mask[np.arange(len(owners)), owners] = False
    return genuine, scores[mask]


class ExperimentRunner:
    """Lazily evaluated pipeline stages for one configuration."""

    def __init__(self, config: ExperimentConfig, output_root: Optional[Path] = None,
                 write: bool = True):
        self.config = config
        self.hash = config_hash(config)
        self.root = Path(output_root or config.output.root)
        self.write = write
        self.seed = config.population.seed
        self.fs = SAMPLE_RATE
        self._started = time.perf_counter()

    # -------------------------------------------------------------------------
    # plumbing
    # -------------------------------------------------------------------------

    @contextmanager
    def stage(self, name: str):
        logger.info(f"[{name}] start")
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except (EarCanError, ValueError, RuntimeError, OSError, FloatingPointError) as e:
            raise StageError(name, self.hash, e) from e
        logger.info(f"[{name}] done in {time.perf_counter() - t0:.1f}s")

    def _dir(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @cached_property
    def geometry(self) -> FrameGeometry:
        return FrameGeometry.from_config(self.config.features, self.fs)

    def features(self, playback: Signal, response: Signal) -> FeatureMatrix:
        return rtf_features(playback, response, self.config.features, self.geometry)

    def embed(self, feats: Iterable[FeatureMatrix]) -> np.ndarray:
        return embed_all(self.net, list(feats))

    @cached_property
    def clip_samples(self) -> int:
        return int(round(self.config.corpus.clip_seconds * self.fs))

    def reference_probe(self, ir: ImpulseResponse, seed: int) -> FeatureMatrix:
        """Channel rendered through a seeded white-noise reference window."""
        reference = white_noise(self.clip_samples, self.config.evaluation.reference_amplitude,
                                seed, self.fs)
        response = acquire(reference, ir, self.config.corpus.noise_amplitude, derive_seed(seed, 1))
        return self.features(reference, response)

    # -------------------------------------------------------------------------
    # enroll
    # -------------------------------------------------------------------------

    @cached_property
    def population(self) -> List[EarProfile]:
        with self.stage("enroll"):
            return sample_population(self.config.population, self.seed)

    @cached_property
    def user_ids(self) -> List[str]:
        return [p.user_id for p in self.population]

    @cached_property
    def chirp_spec(self) -> ChirpSpec:
        return ChirpSpec.from_config(self.config.sounding)

    def sound(self, profile: EarProfile, seed: int) -> Tuple[ImpulseResponse, ImpulseResponse]:
        """(estimate, truth) for one chirp sounding of a session profile."""
        pop, snd = self.config.population, self.config.sounding
        chirp = exponential_chirp(self.chirp_spec, self.fs)
        truth = realize_ir(profile, self.fs, pop.ir_length)
        recorded = acquire(chirp, truth, snd.noise_amplitude, seed)
        est = estimate_ir(chirp, recorded, self.chirp_spec, pop.ir_length, snd.method,
                          snd.regularization, snd.pre_peak_taps, snd.peak_to_rms_min)
        return est, truth

    @cached_property
    def enrollment(self) -> List[List[ImpulseResponse]]:
        """Estimated IR per user per enrollment session."""
        population = self.population
        with self.stage("enroll"):
            pop = self.config.population
            estimates, rows = [], []
            for u, profile in enumerate(population):
                user_irs = []
                for s in range(pop.enroll_sessions):
                    seed = derive_seed(self.seed, _ENROLL, u, s)
                    session = jitter_profile(profile, seed, pop.jitter_freq, pop.jitter_gain)
                    est, truth = self.sound(session, seed)
                    nmse = band_limited_nmse(est, truth, self.chirp_spec.f0, self.chirp_spec.f1)
                    rows.append({"user_id": profile.user_id, "session": s,
                                 "offset": est.offset, "nmse": nmse})
                    if self.write:
                        export_ir(self._dir("enroll") / profile.user_id / f"session_{s}.wav",
                                  est, self.chirp_spec, truth)
                    user_irs.append(est)
                estimates.append(user_irs)

            self.enrollment_table = pd.DataFrame(rows)
            if self.write:
                save_profiles(self._dir("enroll") / "profiles.json", population)
                self.enrollment_table.to_csv(self._dir("enroll") / "enrollment.csv", index=False)
            logger.info(f"Enrolled {len(population)} users x {pop.enroll_sessions} sessions, "
                        f"max NMSE {self.enrollment_table['nmse'].max():.2e}")
            return estimates

    # -------------------------------------------------------------------------
    # synth-corpus
    # -------------------------------------------------------------------------

    @cached_property
    def corpora(self) -> Tuple[List[Corpus], Corpus]:
        """(training corpora, evaluation corpus)."""
        with self.stage("synth-corpus"):
            c, fcfg = self.config.corpus, self.config.features
            if c.external_dir:
                training = [load_wav_corpus(Path(c.external_dir), c.n_clips, fcfg)]
            else:
                training = [
                    synth_corpus(kind, c.n_clips, derive_seed(self.seed, _CORPUS, k),
                                 c.train_silence, c.clip_seconds, self.fs, fcfg)
                    for k, kind in enumerate(c.train_kinds)
                ]
            evaluation = synth_corpus(c.eval_kind, c.eval_clips,
                                      derive_seed(self.seed, _CORPUS, _EVAL_CORPUS),
                                      c.eval_silence, c.clip_seconds, self.fs, fcfg)

            if self.write:
                rows = [
                    {"split": split, "kind": corpus.kind.value, "index": i,
                     "seconds": clip.duration, "silence_fraction": frac}
                    for split, group in (("train", training), ("eval", [evaluation]))
                    for corpus in group
                    for i, (clip, frac) in enumerate(zip(corpus.clips, corpus.silence_fraction))
                ]
                pd.DataFrame(rows).to_csv(self._dir("corpus") / "corpus.csv", index=False)
                for i, clip in enumerate(evaluation.clips):
                    write_wav(self._dir("corpus/eval") / f"clip_{i:04d}.wav", clip)
            logger.info(f"Corpora: {sum(len(t) for t in training)} training clips, "
                        f"{len(evaluation)} eval clips "
                        f"(mean silence {np.mean(evaluation.silence_fraction):.2f})")
            return training, evaluation

    # -------------------------------------------------------------------------
    # augment
    # -------------------------------------------------------------------------

    @cached_property
    def pairs(self) -> Tuple[List[LabeledPair], List[LabeledPair]]:
        """(train, held-out) augmented pairs."""
        enrollment = self.enrollment
        training, _ = self.corpora
        with self.stage("augment"):
            noise = self.config.corpus.noise_amplitude
            everything: List[LabeledPair] = []
            for u, user_irs in enumerate(enrollment):
                for s, ir in enumerate(user_irs):
                    offset = 0
                    for k, corpus in enumerate(training):
                        everything += make_pairs(ir, corpus, noise,
                                                 derive_seed(self.seed, _AUGMENT, u, s, k),
                                                 self.user_ids[u], f"s{s}", clip_offset=offset)
                        offset += len(corpus)
            train_pairs, held_out = split_dataset(everything, self.config.corpus.train_fraction,
                                                  derive_seed(self.seed, _SPLIT))

            if self.write:
                index = [dict(zip(("user_id", "session_id", "clip_index"), p.key), split=split)
                         for split, group in (("train", train_pairs), ("held_out", held_out))
                         for p in group]
                pd.DataFrame(index).to_csv(self._dir("augment") / "pairs.csv", index=False)
                if self.config.output.write_audio:
                    write_manifest(self._dir("augment/train"), train_pairs)
                    write_manifest(self._dir("augment/held_out"), held_out)
            logger.info(f"Augmented {len(everything)} pairs: {len(train_pairs)} train, "
                        f"{len(held_out)} held out")
            return train_pairs, held_out

    @cached_property
    def label_of(self) -> Dict[str, int]:
        return {uid: i for i, uid in enumerate(self.user_ids)}

    @cached_property
    def reference_features(self) -> List[Tuple[FeatureMatrix, int]]:
        """Noise-reference renderings of every enrollment estimate."""
        out = []
        for u, user_irs in enumerate(self.enrollment):
            for s, ir in enumerate(user_irs):
                for r in range(REFERENCE_RENDERINGS):
                    out.append((self.reference_probe(ir, derive_seed(self.seed, _REFERENCE, u, s, r)), u))
        return out

    @cached_property
    def train_features(self) -> List[Tuple[FeatureMatrix, int]]:
        train_pairs, _ = self.pairs
        with self.stage("augment"):
            pair_feats = [(self.features(p.playback, p.response), self.label_of[p.user_id])
                          for p in train_pairs]
            return pair_feats + self.reference_features

    # -------------------------------------------------------------------------
    # train
    # -------------------------------------------------------------------------

    @cached_property
    def net(self) -> NetParams:
        checkpoint = self.root / "model" / "checkpoint.json"
        meta_path = self.root / "model" / "meta.json"
        if self.write and checkpoint.exists() and meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta.get("config_hash") == self.hash:
                logger.info(f"Reusing checkpoint {checkpoint} (config {self.hash})")
                return load_checkpoint(checkpoint)

        dataset = self.train_features
        with self.stage("train"):
            result = train(dataset, self.config.net, derive_seed(self.seed, _TRAIN),
                           n_classes=len(self.population))
            if self.write:
                save_checkpoint(checkpoint, result.params)
                pd.DataFrame({"epoch": np.arange(1, len(result.loss_trace) + 1),
                              "loss": result.loss_trace}).to_csv(self._dir("model") / "loss.csv",
                                                                 index=False)
                meta_path.write_text(json.dumps({"config_hash": self.hash,
                                                 "n_classes": len(self.population),
                                                 "final_loss": result.loss_trace[-1]
                                                 if result.loss_trace else None},
                                                indent=2, sort_keys=True))
            return result.params

    @cached_property
    def templates(self) -> List[Template]:
        """Per user: mean embedding of train-split pairs and enrollment renderings."""
        dataset = self.train_features
        with self.stage("train"):
            vectors = self.embed(f for f, _ in dataset)
            labels = np.array([label for _, label in dataset])
            return [make_template(list(vectors[labels == u])) for u in range(len(self.population))]

    @cached_property
    def template_matrix(self) -> np.ndarray:
        return np.stack([t.vector for t in self.templates])

    # -------------------------------------------------------------------------
    # calibration
    # -------------------------------------------------------------------------

    @cached_property
    def calibration(self) -> Dict[str, float]:
        """theta_accept at the held-out EER; theta_update at FAR <= update_far."""
        _, held_out = self.pairs
        templates = self.template_matrix
        with self.stage("eval"):
            vectors = self.embed(self.features(p.playback, p.response) for p in held_out)
            owners = [self.label_of[p.user_id] for p in held_out]
            genuine, imposter = _split_scores(score_matrix(templates, vectors), owners)
            rate, theta_accept = eer(genuine, imposter)
            strict = far_threshold(genuine, imposter, self.config.session.update_far)
            calibration = {"held_out_eer": rate, "theta_accept": theta_accept,
                           "theta_update": max(theta_accept, strict)}
            if self.write:
                (self._dir("eval") / "calibration.json").write_text(
                    json.dumps(calibration, indent=2, sort_keys=True))
            logger.info(f"Calibrated theta_accept {theta_accept:.3f}, "
                        f"theta_update {calibration['theta_update']:.3f} (held-out EER {rate:.3f})")
            return calibration

    @cached_property
    def session_config(self) -> SessionConfig:
        cal = self.calibration
        return replace(self.config.session, theta_accept=cal["theta_accept"],
                       theta_update=cal["theta_update"])

    # -------------------------------------------------------------------------
    # test sessions
    # -------------------------------------------------------------------------

    @cached_property
    def test_profiles(self) -> List[List[EarProfile]]:
        pop = self.config.population
        return [
            [jitter_profile(profile, derive_seed(self.seed, _TEST, u, s), pop.jitter_freq, pop.jitter_gain)
             for s in range(self.config.evaluation.test_sessions)]
            for u, profile in enumerate(self.population)
        ]

    @cached_property
    def test_irs(self) -> List[List[ImpulseResponse]]:
        ir_length = self.config.population.ir_length
        return [[realize_ir(p, self.fs, ir_length) for p in sessions] for sessions in self.test_profiles]

    @cached_property
    def chirp_probes(self) -> np.ndarray:
        """wearer x test session x dim: fresh chirp sounding rendered through a reference window."""
        profiles = self.test_profiles
        with self.stage("eval"):
            feats = []
            for u, sessions in enumerate(profiles):
                for s, profile in enumerate(sessions):
                    seed = derive_seed(self.seed, _TEST, u, s, 1)
                    est, _ = self.sound(profile, seed)
                    feats.append(self.reference_probe(est, derive_seed(seed, _REFERENCE)))
            return self.embed(feats).reshape(len(profiles), len(profiles[0]), -1)

    def _probe_noise_seed(self, wearer: int, session: int, clip: int) -> int:
        return derive_seed(self.seed, _PROBE_NOISE, wearer, session, clip)

    @cached_property
    def playback_probes(self) -> np.ndarray:
        """wearer x probe x dim for the raw eval clips; probe = session * n_clips + clip."""
        _, evaluation = self.corpora
        irs = self.test_irs
        with self.stage("eval"):
            noise = self.config.corpus.noise_amplitude
            feats = [
                self.features(clip, acquire(clip, irs[u][s], noise, self._probe_noise_seed(u, s, c)))
                for u in range(len(irs))
                for s in range(len(irs[u]))
                for c, clip in enumerate(evaluation.clips)
            ]
            return self.embed(feats).reshape(len(irs), -1, self.net.embed_dim)

    # -------------------------------------------------------------------------
    # watermark
    # -------------------------------------------------------------------------

    @cached_property
    def patched_probes(self) -> Dict[Tuple[int, int, int], PatchedProbe]:
        """One optimised patch per (test session, eval clip, claimed user)."""
        _, evaluation = self.corpora
        net, templates, enrollment = self.net, self.templates, self.enrollment
        with self.stage("watermark"):
            wm, fcfg = self.config.watermark, self.config.features
            out: Dict[Tuple[int, int, int], PatchedProbe] = {}
            rows = []
            for s in range(self.config.evaluation.test_sessions):
                for c, clip in enumerate(evaluation.clips):
                    mask = deficiency_mask(clip, fcfg, self.geometry)
                    ceiling = compute_ceiling(clip, mask, fcfg, wm.masking_offset_db, self.geometry)
                    for v in range(len(templates)):
                        challenge = issue_challenge(derive_seed(self.seed, _NONCE, s, c, v),
                                                    s * 1000.0, self.config.session)
                        row = {"session": s, "clip": c, "claimed": self.user_ids[v],
                               "deficient_fraction": mask.fraction}
                        if wm.enabled:
                            result = optimize_patch(clip, enrollment[v][0], templates[v], net, ceiling,
                                                    wm.iters, wm.step, challenge.probe_seed, fcfg,
                                                    mask, wm, label=v, hyper=self.config.net)
                            patch = result.patch
                            audit = audit_patch(patch, ceiling)
                            patched = apply_patch(clip, patch, wm.max_clip_fraction)
                            row.update(initial_score=result.initial_score,
                                       final_score=result.final_score,
                                       watermarked=result.watermarked,
                                       fallbacks=result.global_fallbacks,
                                       cells=audit.cells, violations=audit.violations,
                                       max_excess_db=_finite(audit.max_excess_db))
                        else:
                            patch = WatermarkPatch(np.zeros(mask.shape), np.zeros(mask.shape, dtype=bool),
                                                   challenge.probe_seed, self.geometry, len(clip))
                            patched = clip
                            row.update(watermarked=False, cells=0, violations=0)
                        if self.write and wm.enabled:
                            patch.save(self._dir("watermark/patches") /
                                       f"s{s}_c{c:02d}_{self.user_ids[v]}.json")
                        out[(s, c, v)] = PatchedProbe(challenge, clip, patched, patch)
                        rows.append(row)

            self.patch_table = pd.DataFrame(rows)
            if self.write:
                self.patch_table.to_csv(self._dir("watermark") / "patches.csv", index=False)
            logger.info(f"Optimised {len(out)} patches")
            return out

    @cached_property
    def watermarked_probes(self) -> np.ndarray:
        """wearer x claimed x probe x dim: each wearer's response to every claimed user's patch."""
        probes = self.patched_probes
        irs = self.test_irs
        _, evaluation = self.corpora
        with self.stage("eval"):
            noise = self.config.corpus.noise_amplitude
            n_users, n_clips = len(irs), len(evaluation)
            feats = [
                self.features(probes[(s, c, v)].patched,
                              acquire(probes[(s, c, v)].patched, irs[u][s], noise,
                                      self._probe_noise_seed(u, s, c)))
                for u in range(n_users)
                for v in range(n_users)
                for s in range(len(irs[u]))
                for c in range(n_clips)
            ]
            return self.embed(feats).reshape(n_users, n_users, -1, self.net.embed_dim)

    # -------------------------------------------------------------------------
    # eval
    # -------------------------------------------------------------------------

    def _condition_scores(self, condition: str) -> Tuple[np.ndarray, np.ndarray]:
        templates = self.template_matrix
        if condition == "watermarked":
            w = self.watermarked_probes
            n = w.shape[0]
            # score of wearer u's probe under claimed user v's patch against template v
            scores = np.clip(np.einsum("uvpe,ve->uvp", w, templates), -1.0, 1.0)
            genuine = np.concatenate([scores[u, u] for u in range(n)])
            imposter = np.concatenate([scores[u, v] for u in range(n) for v in range(n) if u != v])
            return genuine, imposter

        probes = self.chirp_probes if condition == "chirp" else self.playback_probes
        flat = probes.reshape(-1, probes.shape[-1])
        owners = np.repeat(np.arange(probes.shape[0]), probes.shape[1])
        return _split_scores(score_matrix(templates, flat), owners)

    @cached_property
    def conditions(self) -> Dict[str, Dict]:
        """EER summary and ROC table per verification condition."""
        out = {}
        for condition in CONDITIONS:
            genuine, imposter = self._condition_scores(condition)
            with self.stage("eval"):
                directory = self._dir("eval") if self.write else None
                if directory is not None:
                    summary = write_metrics(directory, condition, genuine, imposter)
                else:
                    rate, threshold = eer(genuine, imposter)
                    summary = {"eer": rate, **accuracy_at(threshold, genuine, imposter)}
                summary["roc_table"] = f"eval/{condition}_roc.csv"
                summary["imposter_far_at_accept"] = rates_at(
                    self.session_config.theta_accept, genuine, imposter)[0]
                out[condition] = summary
            logger.info(f"{condition:12} EER {summary['eer']:.3f}")
        return out

    # -------------------------------------------------------------------------
    # session-sim
    # -------------------------------------------------------------------------

    @cached_property
    def probe_bank(self) -> ProbeBank:
        return ProbeBank(
            user_ids=self.user_ids,
            templates=self.templates,
            login=self.chirp_probes,
            windows=self.watermarked_probes,
            probes=self.patched_probes,
            test_profiles=self.test_profiles,
            est_irs=[irs[0] for irs in self.enrollment],
            net=self.net,
            session=self.session_config,
        )

    def genuine_session(self, u: int) -> SessionState:
        """Login, session_windows continuous windows, relogin after any lock."""
        bank, cfg = self.probe_bank, self.session_config
        login = bank.login[u]
        windows = bank.windows[u, u]
        state = new_session(bank.templates[u], cfg)
        for attempt in range(max(1, cfg.max_login_attempts)):
            state = initial_login(state, score(state.template, login[attempt % len(login)]))
            if state.phase is Phase.AUTHENTICATED:
                break
        if state.phase is not Phase.AUTHENTICATED:
            return state

        relogins = 0
        for j in range(self.config.evaluation.session_windows):
            if state.phase is Phase.LOCKED:
                relogins += 1
                state = relogin(state, score(state.template, login[relogins % len(login)]))
                if state.phase is not Phase.AUTHENTICATED:
                    break
            probe = windows[j % len(windows)]
            s = score(state.template, probe)
            state = window_step(state, s)
            state = maybe_update_template(state, Embedding(probe), s)
        return state

    @cached_property
    def session_stats(self) -> Dict:
        bank = self.probe_bank
        with self.stage("session-sim"):
            states = [self.genuine_session(u) for u in range(bank.n_users)]
            locked = [any(e.decision == "lock" for e in st.event_log) for st in states]
            logged_in = [any(e.event == "login" and e.decision == "accept" for e in st.event_log)
                         for st in states]
            if self.write:
                write_trace(self._dir("sessions") / "traces.jsonl", states, self.user_ids)

            k_fail = self.config.session.k_fail
            scenarios = {name: simulate_intrusion(self.config, name, bank).summary(k_fail)
                         for name in (INSIDER, GENUINE, REPLAY, DELAYED, IMPOSTER_LOGIN)}
            if self.write:
                (self._dir("sessions") / "intrusion.json").write_text(
                    json.dumps(scenarios, indent=2, sort_keys=True))

            insider = scenarios[INSIDER]
            return {
                "genuine_sessions": len(states),
                "genuine_login_rate": float(np.mean(logged_in)),
                "genuine_false_lock_rate": float(np.mean(locked)),
                "intruder_lock_rate": insider.get("lock_rate", 0.0),
                "median_windows_to_lock": insider.get("median_windows_to_lock"),
                "lock_within_k_rate": insider.get("lock_within_k_rate", 0.0),
                "scenarios": scenarios,
            }

    # -------------------------------------------------------------------------
    # report
    # -------------------------------------------------------------------------

    def watermark_summary(self) -> Dict:
        self.patched_probes
        table = self.patch_table
        out = {"patches": int(len(table)), "objective": self.config.watermark.objective,
               "enabled": bool(self.config.watermark.enabled),
               "mean_deficient_fraction": float(table["deficient_fraction"].mean())}
        if self.config.watermark.enabled:
            excess = table["max_excess_db"].dropna()
            out.update(
                cells_audited=int(table["cells"].sum()),
                violations=int(table["violations"].sum()),
                max_excess_db=float(excess.max()) if len(excess) else None,
                watermarked_patches=int(table["watermarked"].sum()),
                global_fallbacks=int(table["fallbacks"].sum()),
                mean_initial_score=float(table["initial_score"].mean()),
                mean_final_score=float(table["final_score"].mean()),
            )
        return out

    def run(self) -> MetricsReport:
        """Every stage, then report.json."""
        conditions = self.conditions
        sessions = self.session_stats
        scenarios = sessions["scenarios"]
        calibration = dict(self.calibration)
        calibration["enroll_nmse_max"] = float(self.enrollment_table["nmse"].max())

        report = MetricsReport(
            config_hash=self.hash,
            seed=self.seed,
            conditions=conditions,
            calibration=calibration,
            attacks={
                "imposter_far": conditions["watermarked"]["imposter_far_at_accept"],
                "imposter_far_chirp": conditions["chirp"]["imposter_far_at_accept"],
                "replay_rejection_rate": scenarios[REPLAY]["rejection_rate"],
                "delay_rejection_rate": scenarios[DELAYED]["rejection_rate"],
                "imposter_login_rejection_rate": scenarios[IMPOSTER_LOGIN]["rejection_rate"],
                REPLAY: scenarios[REPLAY],
                DELAYED: scenarios[DELAYED],
                IMPOSTER_LOGIN: scenarios[IMPOSTER_LOGIN],
            },
            sessions={k: v for k, v in sessions.items() if k != "scenarios"} | {
                INSIDER: scenarios[INSIDER], GENUINE: scenarios[GENUINE]},
            watermark=self.watermark_summary(),
            wall_clock_seconds=round(time.perf_counter() - self._started, 3),
        )
        with self.stage("report"):
            report.validate()
            if self.write:
                report.write(self.root / "report.json")
        return report


def run_experiment(config: ExperimentConfig, output_root: Optional[Path] = None,
                   write: bool = True) -> MetricsReport:
    return ExperimentRunner(config, output_root, write).run()


def run_seed_sweep(config: ExperimentConfig, seeds: Sequence[int],
                   output_root: Optional[Path] = None) -> pd.DataFrame:
    """Per-seed EERs for the three conditions plus a median row."""
    root = Path(output_root or config.output.root)
    rows = []
    for seed in seeds:
        cfg = copy.deepcopy(config)
        cfg.population.seed = int(seed)
        report = run_experiment(cfg, root / f"seed_{seed}")
        order = report.ordering()
        rows.append({"seed": int(seed),
                     **{f"eer_{c}": report.eer(c) for c in CONDITIONS},
                     "ordering_holds": order["chirp_le_watermarked"] and order["watermarked_le_playback"],
                     "strict_improvement": order["watermarked_lt_playback"]})

    df = pd.DataFrame(rows)
    medians = {f"eer_{c}": float(df[f"eer_{c}"].median()) for c in CONDITIONS}
    median_row = {"seed": "median", **medians,
                  "ordering_holds": medians["eer_chirp"] <= medians["eer_watermarked"] <= medians["eer_playback"],
                  "strict_improvement": int(df["strict_improvement"].sum())}
    df = pd.concat([df, pd.DataFrame([median_row])], ignore_index=True)

    root.mkdir(parents=True, exist_ok=True)
    df.to_csv(root / "sweep.csv", index=False)
    logger.info(f"Seed sweep over {len(seeds)} seeds written to {root / 'sweep.csv'}")
    return df
