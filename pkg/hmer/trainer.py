# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

"""
Teacher-forced training with Adam, checkpoints, validation by greedy decoding
and probability-averaging ensembles.

Every random draw comes from a stream derived from the root seed, the epoch and
the sample or iteration index, so a run is reproducible no matter how batch
preparation overlaps with the optimizer step.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .augment import AugmentConfig, apply_training_augment, prepare_test_image
from .dataio import EOS, SOS, Sample, Vocabulary
from .decoder import pick
from .evalviz import EvalReport, exprate
from .model import Recognizer
from .nncore import (AdamState, Tensor, adam_step, clip_grad_norm, derive_rng, derive_seed, load_arrays, no_grad,
                     save_arrays)

log = logging.getLogger(__name__)

LOG_NAME = 'train.log'
BEST_NAME = 'best.ckpt'
LAST_NAME = 'last.ckpt'


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 200
    seed: int = 0
    val_every: int = 1
    checkpoint_dir: str = 'runs'
    max_decode_len: int = 64
    # 0 disables clipping / early stopping
    clip_norm: float = 0.0
    patience: int = 0
    prefetch: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f'batch_size must be >= 1, got {self.batch_size}')
        if not self.lr > 0:
            raise ValueError(f'lr must be positive, got {self.lr}')
        if self.epochs < 1 or self.val_every < 1 or self.max_decode_len < 1:
            raise ValueError('epochs, val_every and max_decode_len must be >= 1')
        if self.clip_norm < 0 or self.patience < 0:
            raise ValueError('clip_norm and patience must be non-negative')


@dataclass
class Checkpoint:
    path: Path
    epoch: int
    val_exprate: Optional[float]
    history: List[dict] = field(default_factory=list)


####################
# Batches and loss #
####################
def make_targets(labels: Sequence[Sequence[str]], vocab: Vocabulary) -> np.ndarray:
    """B x T target ids padded with <pad>; T is the longest label."""
    longest = max(len(label) for label in labels)
    targets = np.full((len(labels), longest), vocab.pad_id, dtype=np.int64)
    for row, label in enumerate(labels):
        targets[row, :len(label)] = vocab.encode(label)
    return targets


def make_batch(samples: Sequence[Sample], cfg: AugmentConfig,
               rngs: Optional[Sequence[np.random.Generator]] = None) -> Tuple[np.ndarray, List[List[str]]]:
    """Canvas-sized B x H x W images; ``rngs`` (one per sample) selects the training path."""
    if rngs is None:
        images = [prepare_test_image(s.image, cfg) for s in samples]
    else:
        images = [apply_training_augment(s.image, cfg, rng) for s, rng in zip(samples, rngs)]
    return np.stack(images).astype(np.float32), [list(s.label) for s in samples]


def teacher_forced_loss(model: Recognizer, images: np.ndarray, labels: Sequence[Sequence[str]],
                        rng: Optional[np.random.Generator], mode: str = 'train') -> Tensor:
    """Mean -log p(y_t | y_<t) over non-pad target positions; the decoder is always fed ground truth."""
    if len(labels) == 0:
        raise ValueError('teacher_forced_loss needs a non-empty batch')
    for label in labels:
        if not label or label[-1] != EOS:
            raise ValueError(f'label {label!r} is not terminated by {EOS}')
    vocab = model.vocab
    targets = make_targets(labels, vocab)
    inputs = np.concatenate([np.full((len(labels), 1), vocab.id(SOS)), targets[:, :-1]], axis=1)
    mask = (targets != vocab.pad_id).astype(np.float64)

    memory = model.decoder.prepare(model.encode(images, mode, rng))
    state = model.decoder.initial_state(memory)
    total = None
    for t in range(targets.shape[1]):
        out = model.decoder.decode_step(inputs[:, t], state, memory, mode, rng)
        state = out.state
        picked = pick(out.log_probs, targets[:, t]) * Tensor(mask[:, t].astype(out.log_probs.dtype))
        step = picked.sum()
        total = step if total is None else total + step
    return total * (-1.0 / mask.sum())


####################
# Evaluation       #
####################
def evaluate_model(model: Recognizer, samples: Sequence[Sample], cfg: AugmentConfig, max_len: int) -> EvalReport:
    predictions = []
    truncated = 0
    for sample in samples:
        tokens, record = model.predict(prepare_test_image(sample.image, cfg), max_len)
        truncated += record.truncated
        predictions.append(tokens)
    if truncated:
        log.warning('%d of %d decodes hit max_len=%d without %s', truncated, len(samples), max_len, EOS)
    return exprate(predictions, [s.label for s in samples], [s.source for s in samples])


def ensemble_predict(models: Sequence[Recognizer], image: np.ndarray,
                     max_len: int) -> Tuple[List[str], List[np.ndarray]]:
    """Greedy decoding on the arithmetic mean of the members' step distributions."""
    if not models:
        raise ValueError('ensemble_predict needs at least one model')
    first = models[0]
    for other in models[1:]:
        if other.vocab != first.vocab:
            raise ValueError('ensemble members use different vocabularies')
        if other.canvas != first.canvas:
            raise ValueError(f'ensemble members use different canvases: {first.canvas} vs {other.canvas}')
    if max_len < 1:
        raise ValueError(f'max_len must be >= 1, got {max_len}')

    eos = first.vocab.eos_id
    with no_grad():
        memories = [m.decoder.prepare(m.encode(image, 'eval')) for m in models]
        states = [m.decoder.initial_state(mem) for m, mem in zip(models, memories)]
        token = first.vocab.sos_id
        tokens, distributions = [], []
        for _ in range(max_len):
            probs = []
            for i, (m, mem) in enumerate(zip(models, memories)):
                out = m.decoder.decode_step([token], states[i], mem, 'eval')
                states[i] = out.state
                probs.append(out.probs[0].astype(np.float64))
            averaged = np.mean(probs, axis=0)
            distributions.append(averaged)
            token = int(averaged.argmax())
            tokens.append(first.vocab.token(token))
            if token == eos:
                break
    return tokens, distributions


def evaluate_ensemble(models: Sequence[Recognizer], samples: Sequence[Sample], cfg: AugmentConfig,
                      max_len: int) -> EvalReport:
    predictions = [ensemble_predict(models, prepare_test_image(s.image, cfg), max_len)[0] for s in samples]
    return exprate(predictions, [s.label for s in samples], [s.source for s in samples])


####################
# Checkpoints      #
####################
def save_checkpoint(path, model: Recognizer, adam: Optional[AdamState] = None, **meta):
    arrays = model.store.arrays()
    if adam is not None:
        arrays.update(adam.arrays())
    meta = dict(meta, model=model.describe(), fingerprint=model.fingerprint(),
                adam_t=adam.t if adam is not None else 0)
    save_arrays(path, arrays, meta)
    log.info('checkpoint written to %s', path)


def load_checkpoint(path) -> Tuple[Recognizer, dict, AdamState]:
    arrays, meta = load_arrays(path)
    if 'model' not in meta:
        raise ValueError(f'{path} does not describe a recognizer')
    model = Recognizer.from_description(meta['model'])
    model.store.load(arrays)
    adam = AdamState.for_store(model.store)
    if meta.get('adam_t', 0):
        adam.load(arrays, meta['adam_t'])
    return model, meta, adam


####################
# Training loop    #
####################
def _iteration_rng(cfg: TrainConfig, epoch: int, iteration: int) -> np.random.Generator:
    return derive_rng(cfg.seed, 'step', epoch, iteration)


def _prepare(samples: Sequence[Sample], indices: np.ndarray, cfg: TrainConfig, augment: AugmentConfig, epoch: int):
    batch = [samples[i] for i in indices]
    rngs = [derive_rng(cfg.seed, 'augment', epoch, int(i)) for i in indices]
    return make_batch(batch, augment, rngs)


def train(model: Recognizer, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig,
          augment: AugmentConfig, run_dir=None) -> Checkpoint:
    """
    Train ``model`` in place and return the best checkpoint.

    The best checkpoint is chosen by validation ExpRate (ties keep the earlier
    epoch); without a validation set the last epoch is the best one.
    """
    if not train_set:
        raise ValueError('train needs a non-empty training set')
    if tuple(model.canvas) != augment.canvas:
        raise ValueError(f'model canvas {model.canvas} differs from augment canvas {augment.canvas}')
    run_dir = Path(run_dir or cfg.checkpoint_dir)
    os.makedirs(run_dir, exist_ok=True)
    log_path = run_dir / LOG_NAME
    best_path, last_path = run_dir / BEST_NAME, run_dir / LAST_NAME

    adam = AdamState.for_store(model.store)
    history: List[dict] = []
    best: Optional[Checkpoint] = None
    stale = 0
    iteration = 0
    config_meta = {'train': asdict(cfg), 'augment': asdict(augment)}

    with open(log_path, 'w', encoding='utf-8') as train_log, \
            ThreadPoolExecutor(max_workers=1) as pool:
        train_log.write('epoch\tloss\tval_exprate\n')
        for epoch in range(1, cfg.epochs + 1):
            order = derive_rng(cfg.seed, 'shuffle', epoch).permutation(len(train_set))
            batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
            pending = pool.submit(_prepare, train_set, batches[0], cfg, augment, epoch) if cfg.prefetch else None
            losses = []
            for b, indices in enumerate(batches):
                if cfg.prefetch:
                    images, labels = pending.result()
                    if b + 1 < len(batches):
                        pending = pool.submit(_prepare, train_set, batches[b + 1], cfg, augment, epoch)
                else:
                    images, labels = _prepare(train_set, indices, cfg, augment, epoch)

                loss = teacher_forced_loss(model, images, labels, _iteration_rng(cfg, epoch, iteration))
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f'non-finite loss {value} at iteration {iteration} (epoch {epoch})')
                loss.backward()
                if cfg.clip_norm > 0:
                    clip_grad_norm(model.store, cfg.clip_norm)
                adam_step(model.store, adam, cfg.lr)
                losses.append(value)
                log.debug('epoch %d iteration %d loss %.6f', epoch, iteration, value)
                iteration += 1

            epoch_loss = float(np.mean(losses))
            val_rate = None
            if val_set and epoch % cfg.val_every == 0:
                val_rate = evaluate_model(model, val_set, augment, cfg.max_decode_len).exprate
            history.append({'epoch': epoch, 'loss': epoch_loss, 'val_exprate': val_rate})
            rate_text = f'{val_rate:.2f}' if val_rate is not None else '-'
            train_log.write(f'{epoch}\t{epoch_loss:.6f}\t{rate_text}\n')
            train_log.flush()
            log.info('epoch %d/%d loss %.4f val ExpRate %s', epoch, cfg.epochs, epoch_loss, rate_text)

            meta = dict(config_meta, epoch=epoch, val_exprate=val_rate, history=history)
            save_checkpoint(last_path, model, adam, **meta)
            improved = False
            if not val_set:
                improved = True
            elif val_rate is not None:
                improved = best is None or best.val_exprate is None or val_rate > best.val_exprate
            if improved:
                save_checkpoint(best_path, model, adam, **meta)
                best = Checkpoint(best_path, epoch, val_rate, list(history))
                stale = 0
            elif val_rate is not None:
                stale += 1
                if cfg.patience and stale >= cfg.patience:
                    log.info('no validation improvement for %d evaluations, stopping at epoch %d', stale, epoch)
                    break

    if best is None:
        save_checkpoint(best_path, model, adam, **dict(config_meta, epoch=epoch, val_exprate=None, history=history))
        best = Checkpoint(best_path, epoch, None, list(history))
    best.history = history
    return best


def train_ensemble(build_model, members: int, train_set: Sequence[Sample], val_set: Sequence[Sample],
                   cfg: TrainConfig, augment: AugmentConfig, run_dir) -> List[Checkpoint]:
    """
    Train ``members`` differently initialised models; ``build_model(seed)`` returns a fresh Recognizer.

    Member ``i`` lives in ``run_dir/model_<i>`` and initialises its parameters
    from a seed derived from the root seed and ``i``.
    """
    if members < 1:
        raise ValueError(f'members must be >= 1, got {members}')
    checkpoints = []
    for member in range(members):
        model = build_model(derive_seed(cfg.seed, 'params', member))
        member_dir = Path(run_dir) / f'model_{member}'
        log.info('training ensemble member %d/%d in %s', member + 1, members, member_dir)
        checkpoints.append(train(model, train_set, val_set, cfg, augment, member_dir))
    return checkpoints
