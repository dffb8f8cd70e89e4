"""Command-line interface: ``enrollmix <command> [options]``.

Commands
--------
synth      sample a synthetic cohort from a shipped scenario or a CMM file
fit        train a CMM, naive Bayes or TAN mixture and save it as JSON
sample     draw students from a saved model
eval       mean-field error, inference accuracy, novelty, subject mix, latent states
infer      per-student enrollment probabilities at a hidden timestep
score      per-student log-likelihood under a CMM
sankey     expected transition flows as Sankey JSON
summarize  descriptive statistics of a transcript file

Every stochastic step draws from ``derive_seed(--seed, key)`` with a fixed
key per step, so one number reproduces a whole run.  Exit status is 0 on
success, 1 for usage errors, 2 for bad input data and 3 for numerical
failures.  Progress goes to stderr.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import baselines, cmm, data_model, evaluation, scenarios
from ._random import derive_seed
from .errors import DataError, NumericalError
from .modelfile import ModelFile, kind_of, load_model, save_model

log = logging.getLogger("enrollmix")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

# sub-seed keys
SEED_PARAMS, SEED_SAMPLE, SEED_FIT, SEED_SPLIT, SEED_REFINE, SEED_MC = range(6)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(kind):
    def check(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid {kind.__name__} value: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return check


def _course_list(text):
    return [s for s in (x.strip() for x in text.split(",")) if s]


def _write_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=False) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_cohort(path, timesteps, vocab=None):
    c = data_model.load_transcripts_csv(path, timestep_count=timesteps)
    return c if vocab is None else data_model.reindex_cohort(c, vocab)


def _model_timesteps(params):
    return params.n_timesteps


def _require_vocab(mf):
    if mf.vocabulary is None:
        raise DataError("model file carries no vocabulary")
    return mf.vocabulary


def _query_indices(vocab, courses):
    missing = [cid for cid in courses if cid not in vocab.index]
    if missing:
        raise DataError(f"unknown query courses: {', '.join(missing)}")
    return [vocab.index[cid] for cid in courses]


def _threads(n):
    return n if n else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    if args.model_file:
        mf = load_model(args.model_file)
        if mf.kind != "cmm":
            raise DataError("synth --model-file needs a cmm model; use `sample` for baselines")
        params, vocab = mf.params, mf.vocabulary
    else:
        pseed = derive_seed(args.seed, SEED_PARAMS)
        if args.scenario == "recovery":
            params = scenarios.recovery_params(pseed)
        elif args.scenario == "correlated":
            params = scenarios.correlated_params(pseed, **scenarios.BENCHMARK.generator)
        else:
            params = scenarios.coupled_params(**scenarios.INFERENCE_SCENARIO)
        vocab = scenarios.vocabulary(params.n_courses)
    c = data_model.synth_generate(params, args.n, derive_seed(args.seed, SEED_SAMPLE), vocab)
    data_model.write_transcripts_csv(c, args.out)
    log.info("wrote %d students to %s", c.n_students, args.out)
    if c.n_timesteps != data_model.DEFAULT_TIMESTEPS:
        log.info("cohort has %d timesteps; pass --timesteps %d when loading it", c.n_timesteps, c.n_timesteps)


def cmd_fit(args):
    c = _load_cohort(args.input, args.timesteps)
    c = data_model.filter_cohort(c, args.min_total_courses, args.min_per_timestep)
    if args.holdout_fraction is not None:
        c, holdout = data_model.split_cohort(c, args.holdout_fraction, derive_seed(args.seed, SEED_SPLIT))
        if args.holdout_out:
            data_model.write_transcripts_csv(holdout, args.holdout_out)
            log.info("wrote %d holdout students to %s", holdout.n_students, args.holdout_out)
    log.info("fitting %s with K=%d on %d students", args.model, args.k, c.n_students)
    fit_seed = derive_seed(args.seed, SEED_FIT)
    if args.model == "cmm":
        fit = cmm.em_fit_pm1(c, args.k, max_iters=args.max_iters, tol=args.tol, seed=fit_seed,
                             restarts=args.restarts, epsilon=args.epsilon, n_jobs=_threads(args.threads))
        params, iters, final = fit.params, len(fit.trace), fit.loglik
        if args.refine_steps:
            res = cmm.refine_policy_gradient(params, c, args.refine_steps, args.learning_rate,
                                             args.k_mc, derive_seed(args.seed, SEED_REFINE))
            if res.aborted:
                log.warning("refinement stopped early: %s", res.message)
            params = res.params
            final = float(cmm.posteriors(params, c).loglik.sum())
    else:
        fitter = baselines.nb_fit_em if args.model == "nb" else baselines.tan_fit_em
        fit = fitter(c, args.k, max_iters=args.max_iters, tol=args.tol, seed=fit_seed)
        params, iters, final = fit.params, len(fit.trace), fit.loglik
    meta = {
        "seed": args.seed,
        "k_states": args.k,
        "iterations": iters,
        "final_loglik": float(final),
        "n_students": c.n_students,
    }
    if args.model == "cmm":
        meta.update(restarts=args.restarts, epsilon=args.epsilon, refine_steps=args.refine_steps)
    save_model(ModelFile(args.model, params, c.vocab, meta), args.out)
    log.info("saved %s model to %s (loglik %.6g after %d iterations)", args.model, args.out, final, iters)


def cmd_sample(args):
    mf = load_model(args.model_file)
    seed = derive_seed(args.seed, SEED_SAMPLE)
    if mf.kind == "cmm":
        c = cmm.sample_students(mf.params, args.n, seed, vocab=mf.vocabulary)
    else:
        c = baselines.model_sample(mf.params, args.n, seed, vocab=mf.vocabulary)
    data_model.write_transcripts_csv(c, args.out)
    log.info("wrote %d sampled students to %s", args.n, args.out)


def cmd_eval(args):
    metric = args.metric
    if metric == "mean-field":
        if not (args.holdout and args.samples):
            raise UsageError("eval --metric mean-field needs --holdout and --samples")
        holdout = _load_cohort(args.holdout, args.timesteps)
        samples = _load_cohort(args.samples, args.timesteps, holdout.vocab)
        report = evaluation.mean_field_report(holdout, samples, args.scope)
    elif metric == "accuracy":
        if not (args.model_file and args.holdout and args.courses is not None and args.query_t is not None):
            raise UsageError("eval --metric accuracy needs --model-file, --holdout, --query-t and --courses")
        mf = load_model(args.model_file)
        vocab = _require_vocab(mf)
        holdout = _load_cohort(args.holdout, _model_timesteps(mf.params), vocab)
        q = _query_indices(vocab, args.courses)
        if mf.kind == "cmm":
            rep = evaluation.inference_accuracy(mf.params, holdout, args.query_t, q, args.threshold,
                                                args.k_mc, derive_seed(args.seed, SEED_MC))
        else:
            rep = evaluation.baseline_inference_accuracy(mf.params, holdout, args.query_t, q, args.threshold)
        report = rep.to_json_dict()
        report["model_kind"] = mf.kind
        if args.reference:
            ref = _load_cohort(args.reference, _model_timesteps(mf.params), vocab)
            report["majority_accuracy"] = evaluation.majority_accuracy(ref, holdout, args.query_t, q)
        report["predictions"] = [
            {"student_id": sid, "probabilities": [float(v) for v in prob], "predicted": [int(v) for v in pred]}
            for sid, prob, pred in zip(holdout.student_ids, rep.probabilities, rep.predictions)
        ]
    elif metric in ("novelty", "subject-mix"):
        if not (args.input and args.k):
            raise UsageError(f"eval --metric {metric} needs --input and --k")
        c = _load_cohort(args.input, args.timesteps)
        rep = evaluation.novelty_scores(c, args.k, folds=args.folds, seed=derive_seed(args.seed, SEED_FIT),
                                        max_iters=args.max_iters, tol=args.tol, restarts=args.restarts)
        report = rep.to_json_dict() if metric == "novelty" else evaluation.subject_mix(c, rep)
    else:  # latent
        if not (args.model_file and args.input):
            raise UsageError("eval --metric latent needs --model-file and --input")
        mf = load_model(args.model_file)
        if mf.kind != "cmm":
            raise DataError("latent assignment needs a cmm model")
        c = _load_cohort(args.input, _model_timesteps(mf.params), _require_vocab(mf))
        report = evaluation.latent_assignment_json(mf.params, c)
    _write_json(report, args.out)


def cmd_infer(args):
    mf = load_model(args.model_file)
    if mf.kind != "cmm":
        raise DataError("infer needs a cmm model")
    vocab = _require_vocab(mf)
    p = mf.params
    c = _load_cohort(args.input, p.n_timesteps, vocab)
    q = _query_indices(vocab, args.courses)
    if args.observed is None:
        observed = [t for t in range(p.n_timesteps) if t != args.query_t]
    else:
        observed = args.observed
    if args.query_t in observed:
        raise DataError("the query timestep cannot also be fully observed")
    seed = derive_seed(args.seed, SEED_MC)
    rows = []
    for i, sid in enumerate(c.student_ids):
        mask = cmm.ObservationMask.from_record(c.data[i], observed)
        res = cmm.infer_intermediate(p, mask, args.query_t, q, k_mc=args.k_mc, seed=derive_seed(seed, i))
        rows.append({
            "student_id": sid,
            "probabilities": {vocab.course_ids[j]: float(v) for j, v in zip(q, res.probabilities)},
            "std_errors": {vocab.course_ids[j]: float(v) for j, v in zip(q, res.std_errors)},
            "state_posterior": [float(v) for v in res.state_posterior],
        })
    _write_json({"schema_version": 1, "query_t": args.query_t, "observed_timesteps": sorted(observed),
                 "students": rows}, args.out)


def cmd_score(args):
    mf = load_model(args.model_file)
    if mf.kind != "cmm":
        raise DataError("score needs a cmm model")
    p = mf.params
    c = _load_cohort(args.input, p.n_timesteps, _require_vocab(mf))
    seed = derive_seed(args.seed, SEED_MC)
    rows = []
    for i, sid in enumerate(c.student_ids):
        if args.mode == "pm1_exact":
            rows.append({"student_id": sid, "loglik": cmm.student_loglik(p, c.data[i])})
        else:
            est = cmm.student_loglik(p, c.data[i], mode="binary_mc", k_mc=args.k_mc, seed=derive_seed(seed, i))
            rows.append({"student_id": sid, "loglik": est.value, "std_error": est.std_error})
    _write_json({"schema_version": 1, "mode": args.mode, "students": rows}, args.out)


def cmd_sankey(args):
    mf = load_model(args.model_file)
    if mf.kind != "cmm":
        raise DataError("sankey needs a cmm model")
    c = _load_cohort(args.input, mf.params.n_timesteps, _require_vocab(mf))
    _write_json(cmm.sankey_json(cmm.transition_flows(mf.params, c)), args.out)


def cmd_summarize(args):
    c = _load_cohort(args.input, args.timesteps)
    c = data_model.filter_cohort(c, args.min_total_courses, args.min_per_timestep)
    out = data_model.summarize(c).to_json_dict()
    out["n_students"] = c.n_students
    out["n_courses"] = c.n_courses
    _write_json(out, args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="enrollmix", description="Generative models of course enrollment.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def common(p, seed=True, timesteps=True):
        if seed:
            p.add_argument("--seed", type=int, default=0, help="top-level seed (default 0)")
        if timesteps:
            p.add_argument("--timesteps", type=_positive(int), default=data_model.DEFAULT_TIMESTEPS)

    def em_opts(p):
        p.add_argument("--max-iters", type=_positive(int), default=200)
        p.add_argument("--tol", type=_positive(float), default=1e-6)
        p.add_argument("--restarts", type=_positive(int), default=5)

    def filters(p):
        p.add_argument("--min-total-courses", type=int, default=0)
        p.add_argument("--min-per-timestep", type=int, default=0)

    p = sub.add_parser("synth", help="sample a synthetic cohort")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", choices=("recovery", "correlated", "coupled"), default="recovery")
    src.add_argument("--model-file")
    p.add_argument("--n", type=_positive(int), required=True)
    p.add_argument("--out", required=True)
    common(p, timesteps=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="train a model")
    p.add_argument("--model", choices=("cmm", "nb", "tan"), required=True)
    p.add_argument("--k", type=_positive(int), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=_positive(float), default=cmm.DEFAULT_EPSILON)
    p.add_argument("--threads", type=int, default=0, help="threads for EM restarts (0 = all cores)")
    p.add_argument("--holdout-fraction", type=float)
    p.add_argument("--holdout-out")
    p.add_argument("--refine-steps", type=int, default=0, help="policy-gradient steps after EM (cmm)")
    p.add_argument("--learning-rate", type=_positive(float), default=1e-3)
    p.add_argument("--k-mc", type=_positive(int), default=2000)
    common(p)
    em_opts(p)
    filters(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="draw students from a model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--n", type=_positive(int), required=True)
    p.add_argument("--out", required=True)
    common(p, timesteps=False)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="compute a report")
    p.add_argument("--metric", choices=("mean-field", "accuracy", "novelty", "subject-mix", "latent"),
                   required=True)
    p.add_argument("--holdout")
    p.add_argument("--samples")
    p.add_argument("--reference", help="training cohort for the majority baseline (accuracy)")
    p.add_argument("--input")
    p.add_argument("--model-file")
    p.add_argument("--scope", choices=evaluation.SCOPES, default="any_timestep")
    p.add_argument("--query-t", type=int)
    p.add_argument("--courses", type=_course_list)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--k-mc", type=_positive(int), default=4000)
    p.add_argument("--k", type=_positive(int))
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--out", default="-")
    common(p)
    em_opts(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="enrollment probabilities at a hidden timestep")
    p.add_argument("--model-file", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--query-t", type=int, required=True)
    p.add_argument("--courses", type=_course_list, required=True)
    p.add_argument("--observed", type=lambda s: [int(v) for v in s.split(",") if v.strip()],
                   help="comma-separated observed timesteps (default: all but --query-t)")
    p.add_argument("--k-mc", type=_positive(int), default=20000)
    p.add_argument("--out", default="-")
    common(p, timesteps=False)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="per-student log-likelihood")
    p.add_argument("--model-file", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("pm1_exact", "binary_mc"), default="pm1_exact")
    p.add_argument("--k-mc", type=_positive(int), default=10000)
    p.add_argument("--out", default="-")
    common(p, timesteps=False)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sankey", help="transition flows as Sankey JSON")
    p.add_argument("--model-file", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_sankey)

    p = sub.add_parser("summarize", help="descriptive statistics of a cohort")
    p.add_argument("--input", required=True)
    p.add_argument("--out", default="-")
    common(p, seed=False)
    filters(p)
    p.set_defaults(func=cmd_summarize)
    return parser


def run(argv=None):
    """Run one command; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"enrollmix {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"enrollmix {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"enrollmix {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main():
    sys.exit(run())
