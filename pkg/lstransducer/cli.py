#!/usr/bin/env python3
"""
Command-line front end.

    lstransducer synth --out data/train.txt --count 2000
    lstransducer train data/train.txt --out runs/src
    lstransducer decode runs/src data/test.txt --out runs/src/test.nbest --beta 0.3 --beam 10
    lstransducer eval data/test.txt runs/src/test.nbest

Every failure ends in one stderr line `error kind=<ExceptionName> message=<text>`
and exit status 2 (usage, config, contract), 3 (data) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .config import RunConfig, Settings, load_settings, parse_pairs
from .constants import (
    DEFAULT_UTTERANCE_COUNT,
    EXIT_DATA_ERROR,
    EXIT_NUMERIC_FAILURE,
    EXIT_SUCCESS,
    EXIT_USAGE,
    FUSION_LM_WEIGHT,
    METRICS_LOG_NAME,
    SEED,
)
from .ctc import run_oracle_trials
from .dataset import (
    read_dataset,
    read_text_corpus,
    synth_dataset,
    synth_text,
    write_dataset,
    write_metrics_csv,
    write_text_corpus,
)
from .decoder import best_tokens, decode_utterance, read_nbest, write_nbest
from .errors import DataError, LSTransducerError, NumericError
from .gradcheck import run_suite
from .metrics import evaluate
from .nn_blocks import LSTransducerModel, TokenLM
from .seeding import named_rng
from .training import adapt_prediction_network, perplexity, pretrain_lm, train

logger = logging.getLogger(__name__)

# Largest |delta| oracle-ctc accepts before reporting a numeric failure
ORACLE_TOLERANCE = 1e-9


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value configuration file')
    common.add_argument('--seed', type=int, help='Master seed (default: seed from the config)')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='Override one configuration key (repeatable)')
    common.add_argument('--verbose', action='store_true', help='Log at DEBUG level')

    parser = argparse.ArgumentParser(
        prog='lstransducer',
        description='Label-synchronous transducer toolkit on a synthetic speech-like task',
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='Generate a synthetic dataset')
    p.add_argument('--out', required=True, help='Dataset file to write')
    p.add_argument('--domain', choices=['source', 'target'], default='source')
    p.add_argument('--split', default='train', help='Split name; keys its random stream (default: train)')
    p.add_argument('--count', type=int, default=DEFAULT_UTTERANCE_COUNT)
    p.add_argument('--text-out', help='Also write a text-only corpus of --count sequences here')

    p = sub.add_parser('train', parents=[common], help='Train an LS-Transducer')
    p.add_argument('data', help='Dataset file')
    p.add_argument('--out', required=True, help='Run directory for checkpoints and metrics')
    p.add_argument('--gamma', type=float, help='CTC weight in the training loss')
    p.add_argument('--mu', type=float, help='Quantity-loss weight')
    p.add_argument('--lm', help='LM run directory whose weights initialise the prediction network')

    p = sub.add_parser('pretrain-lm', parents=[common], help='Train the prediction network as a text LM')
    p.add_argument('text', help='Text corpus (one token-id sequence per line)')
    p.add_argument('--out', required=True, help='Run directory for the LM checkpoint')
    p.add_argument('--init', help='LM run directory to continue from')

    p = sub.add_parser('adapt', parents=[common], help='Adapt the prediction network on target-domain text')
    p.add_argument('model', help='Trained model run directory')
    p.add_argument('text', help='Target-domain text corpus')
    p.add_argument('--out', required=True, help='Run directory for the adapted model')
    p.add_argument('--freeze-below', type=int, help='First prediction-network layer that adapts')

    p = sub.add_parser('decode', parents=[common], help='Beam-search decode a dataset')
    p.add_argument('model', help='Model run directory')
    p.add_argument('data', help='Dataset file')
    p.add_argument('--out', required=True, help='n-best file to write')
    p.add_argument('--beta', type=float, help='CTC prefix-score weight')
    p.add_argument('--beam', type=int, help='Beam size')
    p.add_argument('--lm-weight', type=float, help=f'Shallow-fusion weight (default {FUSION_LM_WEIGHT} with --lm)')
    p.add_argument('--lm', help='External LM run directory for shallow fusion')
    p.add_argument('--chunk-size', type=int, help='Feed frames to the streaming decoder in chunks of this size')
    p.add_argument('--no-eos-rule', action='store_true', help='Score [eos] before the last frame like the offline prefix score')

    p = sub.add_parser('eval', parents=[common], help='Token error rate of an n-best file')
    p.add_argument('data', help='Reference dataset file')
    p.add_argument('nbest', help='n-best file from decode')

    p = sub.add_parser('gradcheck', parents=[common], help='Finite-difference gradient checks')
    p.add_argument('--model', help='Model run directory (default: freshly initialised)')
    p.add_argument('--data', help='Dataset file (default: two synthetic utterances)')
    p.add_argument('--params', type=int, default=20, help='Parameter entries per utterance')

    p = sub.add_parser('oracle-ctc', parents=[common], help='Compare CTC recursions with path enumeration')
    p.add_argument('--trials', type=int, default=200)
    p.add_argument('--max-T', type=int, default=8)
    p.add_argument('--max-V', type=int, default=4)
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, str] = parse_pairs(args.set, '--set')
    flag_keys = {
        'gamma': 'gamma', 'mu': 'mu', 'beta': 'beta', 'beam': 'beam',
        'lm_weight': 'lm_weight', 'freeze_below': 'freeze_below',
    }
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, 'no_eos_rule', False):
        overrides['eos_rule'] = 'false'
    if getattr(args, 'lm', None) and args.command == 'decode' and 'lm_weight' not in overrides:
        overrides['lm_weight'] = str(FUSION_LM_WEIGHT)
    if args.seed is not None:
        overrides['seed'] = str(args.seed)
    inputs = {k: getattr(args, k) for k in ('data', 'text', 'model', 'nbest', 'lm', 'init') if getattr(args, k, None)}
    return RunConfig(
        command=args.command,
        config_path=args.config,
        seed=args.seed if args.seed is not None else SEED,
        inputs=inputs,
        out=getattr(args, 'out', None),
        overrides=overrides,
    )


# ==============================================================================
# SUBCOMMANDS
# ==============================================================================

def cmd_synth(run: RunConfig, settings: Settings, args) -> None:
    seed = settings.train.seed
    utts = synth_dataset(settings.synth, seed, args.count, args.domain, args.split)
    Path(run.out).parent.mkdir(parents=True, exist_ok=True)
    write_dataset(run.out, utts)
    print(f"✅ Wrote {len(utts)} {args.domain}/{args.split} utterances to {run.out}")
    if args.text_out:
        text = synth_text(settings.synth, seed, args.count, args.domain, args.split)
        write_text_corpus(args.text_out, text)
        print(f"✅ Wrote {len(text)} text sequences to {args.text_out}")


def cmd_train(run: RunConfig, settings: Settings, args) -> None:
    dataset = read_dataset(run.inputs['data'])
    model = LSTransducerModel.initialise(settings.model, settings.train.seed)
    if 'lm' in run.inputs:
        model.load_prediction_network(TokenLM.load(run.inputs['lm']).params)
        print(f"📥 Prediction network initialised from {run.inputs['lm']}")
    print(f"🏋️  Training on {len(dataset)} utterances for {settings.train.epochs} epochs...")
    report = train(model, dataset, settings.train, run.out)
    last = report.history[-1] if report.history else None
    if last is not None:
        print(f"✅ Training complete: total {last.total:.4f}, ce {last.ce:.4f}, "
              f"ctc {last.ctc:.4f}, |sum(alpha)-L| {last.count_error:.3f}")
    print(f"  Checkpoints: {run.out}")


def cmd_pretrain_lm(run: RunConfig, settings: Settings, args) -> None:
    corpus = read_text_corpus(run.inputs['text'])
    init = TokenLM.load(run.inputs['init']) if 'init' in run.inputs else None
    print(f"📚 Training LM on {len(corpus)} sequences...")
    lm, history = pretrain_lm(settings.model, corpus, settings.train, init=init)
    out = Path(run.out)
    lm.save(str(out))
    write_metrics_csv(str(out / METRICS_LOG_NAME), [h.as_row() for h in history])
    print(f"✅ LM written to {out} (training perplexity {perplexity(lm, corpus):.3f})")


def cmd_adapt(run: RunConfig, settings: Settings, args) -> None:
    model = LSTransducerModel.load(run.inputs['model'])
    corpus = read_text_corpus(run.inputs['text'])
    before = perplexity(TokenLM.from_model(model), corpus)
    print(f"🎯 Adapting prediction network on {len(corpus)} sequences (perplexity {before:.3f})...")
    model, history = adapt_prediction_network(model, corpus, settings.train)
    out = Path(run.out)
    model.save(str(out))
    write_metrics_csv(str(out / METRICS_LOG_NAME), [h.as_row() for h in history])
    after = perplexity(TokenLM.from_model(model), corpus)
    print(f"✅ Adapted model written to {out} (perplexity {before:.3f} -> {after:.3f})")


def cmd_decode(run: RunConfig, settings: Settings, args) -> None:
    model = LSTransducerModel.load(run.inputs['model'])
    dataset = read_dataset(run.inputs['data'])
    lm = TokenLM.load(run.inputs['lm']) if 'lm' in run.inputs else None
    beam = settings.beam
    print(f"🔎 Decoding {len(dataset)} utterances (beam {beam.beam}, beta {beam.beta}, lm weight {beam.lm_weight})...")
    truncated = 0
    count_errors = []
    Path(run.out).parent.mkdir(parents=True, exist_ok=True)
    with open(run.out, 'w', encoding='utf-8') as f:
        for utt in dataset:
            result = decode_utterance(model, utt.feats, beam, lm=lm, chunk_size=args.chunk_size)
            write_nbest(f, utt.utt_id, result)
            truncated += int(result.truncated)
            count_errors.append(abs(result.total_alpha - utt.N))
    print(f"✅ n-best written to {run.out}")
    print(f"  Mean |sum(alpha) - N|: {float(np.mean(count_errors)):.3f}")
    if truncated:
        print(f"⚠️  {truncated} utterance(s) never reached [eos]")


def cmd_eval(run: RunConfig, settings: Settings, args) -> None:
    refs = {u.utt_id: list(u.tokens) for u in read_dataset(run.inputs['data'])}
    hyps = best_tokens(read_nbest(run.inputs['nbest']))
    result = evaluate(refs, hyps)
    print(f"📊 token_error_rate={result.token_error_rate:.6f} errors={result.errors} "
          f"ref_tokens={result.ref_tokens} utterances={result.utterances}")
    if result.missing:
        print(f"⚠️  {result.missing} utterance(s) had no hypothesis")


def cmd_gradcheck(run: RunConfig, settings: Settings, args) -> None:
    seed = settings.train.seed
    if 'model' in run.inputs:
        model = LSTransducerModel.load(run.inputs['model'])
    else:
        model = LSTransducerModel.initialise(settings.model, seed)
    if 'data' in run.inputs:
        utts = read_dataset(run.inputs['data'])[:2]
    else:
        utts = synth_dataset(settings.synth, seed, 2, split='gradcheck')
    reports = run_suite(model, utts, settings.train, seed, n_params=args.params)
    failed = []
    for name, report in reports:
        mark = '✓' if report.passed else '✗'
        print(f"  {mark} {name}: max relative error {report.max_rel_error:.3e} over {len(report.entries)} entries")
        if not report.passed:
            failed.append(name)
    worst = max(r.max_rel_error for _, r in reports)
    print(f"max_rel_error={worst:.3e}")
    if failed:
        raise NumericError(f"gradient check failed for {', '.join(failed)}")


def cmd_oracle_ctc(run: RunConfig, settings: Settings, args) -> None:
    rng = named_rng(settings.train.seed, 'oracle')
    report = run_oracle_trials(args.trials, args.max_T, args.max_V, rng)
    print(f"  ctc_loss {report.loss_delta:.3e}  offline {report.offline_delta:.3e}  "
          f"online {report.online_delta:.3e}  [eos] {report.eos_delta:.3e}")
    print(f"max_abs_delta={report.max_delta:.3e}")
    if not report.max_delta < ORACLE_TOLERANCE:
        raise NumericError(f"oracle mismatch {report.max_delta:.3e} >= {ORACLE_TOLERANCE}")


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'pretrain-lm': cmd_pretrain_lm,
    'adapt': cmd_adapt,
    'decode': cmd_decode,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'oracle-ctc': cmd_oracle_ctc,
}


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, DataError):
        return EXIT_DATA_ERROR
    if isinstance(error, NumericError):
        return EXIT_NUMERIC_FAILURE
    return EXIT_USAGE


def report_error(error: BaseException) -> None:
    message = " ".join(str(error).split())
    print(f"error kind={type(error).__name__} message={message}", file=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one subcommand and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            return EXIT_SUCCESS
        print("error kind=UsageError message=invalid command line", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(levelname)s %(name)s: %(message)s',
    )
    try:
        run_cfg = run_config_from_args(args)
        settings = load_settings(run_cfg.config_path, run_cfg.overrides)
        COMMANDS[run_cfg.command](run_cfg, settings, args)
    except (LSTransducerError, ValueError) as e:
        report_error(e)
        return exit_code_for(e)
    except OSError as e:
        report_error(DataError(str(e)))
        return EXIT_DATA_ERROR
    return EXIT_SUCCESS


def main():
    """CLI entry point."""
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
