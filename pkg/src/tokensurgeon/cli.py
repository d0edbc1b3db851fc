"""Command-line front end.

Exit status: 0 on success, 2 for usage or input errors, 1 for anything
unexpected. Errors are printed to stderr as a single ``error: <kind>: <msg>``
line; stdout carries only machine-readable output.
"""

from __future__ import annotations

import json
import logging
import sys
from typing import List, Optional

import click
import numpy as np

from . import diagnostics, tensorio
from .omp import BatchSolveError, SolverConfig, resolve_workers
from .transplant import transplant, transplant_tied_pair
from .vocab_align import EmptyOverlapError, build_dictionary, compute_overlap

LOG = logging.getLogger("tokensurgeon")

INPUT_ERRORS = (
    tensorio.EmbdFormatError,
    tensorio.VocabularyError,
    EmptyOverlapError,
    OSError,
    ValueError,
    KeyError,
    IndexError,
)

_path_in = click.Path(exists=True, dir_okay=False)
_path_out = click.Path(dir_okay=False, writable=True)


class _Progress:
    def __init__(self, enabled: bool, desc: str):
        self.enabled = enabled
        self.desc = desc
        self.bar = None

    def __call__(self, done: int, total: int) -> None:
        if not self.enabled:
            return
        if self.bar is None:
            from tqdm import tqdm

            self.bar = tqdm(total=total, desc=self.desc, file=sys.stderr, unit="tok")
        self.bar.update(done - self.bar.n)

    def close(self) -> None:
        if self.bar is not None:
            self.bar.close()


def _config(k: int, selection: str, reorth: int) -> SolverConfig:
    return SolverConfig(k=k, selection=selection, reorth_interval=reorth or None)


def _solver_options(f):
    f = click.option("--reorth-interval", type=int, default=16, show_default=True,
                     help="Appends between re-orthogonalization passes (0 disables).")(f)
    f = click.option("--selection", type=click.Choice(["normalized", "raw"]),
                     default="normalized", show_default=True)(f)
    f = click.option("--k", "k", type=click.IntRange(min=1), default=64, show_default=True,
                     help="Sparsity: anchors per reconstructed token.")(f)
    return f


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress details to stderr.")
def cli(verbose: bool):
    """Training-free tokenizer transplantation with Orthogonal Matching Pursuit."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command("transplant")
@click.option("--base-emb", type=_path_in, required=True)
@click.option("--base-vocab", type=_path_in, required=True)
@click.option("--donor-emb", type=_path_in, required=True)
@click.option("--donor-vocab", type=_path_in, required=True)
@click.option("--out", type=_path_out, required=True, help="Output EMBD path.")
@click.option("--base-lm-head", type=_path_in, default=None,
              help="Untied output projection of the base model.")
@click.option("--out-lm-head", type=_path_out, default=None)
@click.option("--method", type=click.Choice(["omp", "zero", "mean"]), default="omp",
              show_default=True)
@_solver_options
@click.option("--max-atoms", type=click.IntRange(min=1), default=None,
              help="Random subsample of anchors used as the dictionary.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report", type=_path_out, default=None, help="Write a JSON report here.")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker threads (default: $TOKENSURGEON_THREADS or all cores).")
@click.option("--timings/--no-timings", default=False,
              help="Include wall-clock timings in the report.")
@click.option("--quiet", is_flag=True, help="No progress bar.")
def transplant_cmd(base_emb, base_vocab, donor_emb, donor_vocab, out, base_lm_head,
                   out_lm_head, method, k, selection, reorth_interval, max_atoms, seed,
                   report, threads, timings, quiet):
    """Build embeddings for the donor vocabulary in the base model's space."""
    if (base_lm_head is None) != (out_lm_head is None):
        raise click.UsageError("--base-lm-head and --out-lm-head must be given together")
    b_emb = tensorio.load_embeddings(base_emb)
    b_vocab = tensorio.load_vocabulary(base_vocab)
    d_emb = tensorio.load_embeddings(donor_emb)
    d_vocab = tensorio.load_vocabulary(donor_vocab)
    config = _config(k, selection, reorth_interval)
    progress = _Progress(not quiet, "solving")
    kwargs = dict(max_atoms=max_atoms, seed=seed, workers=resolve_workers(threads),
                  progress=progress)
    try:
        if base_lm_head is not None:
            head = tensorio.load_embeddings(base_lm_head)
            new_in, new_out, rep = transplant_tied_pair(
                b_emb, head, b_vocab, d_emb, d_vocab, method, config, **kwargs)
        else:
            new_in, rep = transplant(b_emb, b_vocab, d_emb, d_vocab, method, config, **kwargs)
            new_out = None
    finally:
        progress.close()
    tensorio.save_embeddings(new_in, out)
    if new_out is not None:
        tensorio.save_embeddings(new_out, out_lm_head)
    if report:
        tensorio.atomic_write_text(report, rep.to_json(timings=timings))
    LOG.info("shared=%d unseen=%d", rep.shared, rep.unseen)


@cli.command("explain")
@click.option("--base-vocab", type=_path_in, required=True)
@click.option("--donor-emb", type=_path_in, required=True)
@click.option("--donor-vocab", type=_path_in, required=True)
@click.option("--token", "tokens", multiple=True, help="Donor token to decompose (repeatable).")
@click.option("--sample", type=click.IntRange(min=0), default=0,
              help="Also decompose this many random unseen donor tokens.")
@_solver_options
@click.option("--max-atoms", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of a text table.")
def explain_cmd(base_vocab, donor_emb, donor_vocab, tokens, sample, k, selection,
                reorth_interval, max_atoms, seed, as_json):
    """Show donor tokens as weighted sums of shared anchor tokens."""
    b_vocab = tensorio.load_vocabulary(base_vocab)
    d_emb = tensorio.load_embeddings(donor_emb)
    d_vocab = tensorio.load_vocabulary(donor_vocab)
    d_vocab.check_pairing(d_emb)
    tokens = list(tokens)
    if sample:
        unseen = sorted((t for t in d_vocab if t not in b_vocab), key=d_vocab.__getitem__)
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(unseen), size=min(sample, len(unseen)), replace=False)
        tokens.extend(unseen[i] for i in sorted(picks))
    if not tokens:
        raise click.UsageError("give at least one --token or --sample N")
    dictionary = build_dictionary(compute_overlap(b_vocab, d_vocab), d_emb,
                                  max_atoms=max_atoms, seed=seed)
    config = _config(k, selection, reorth_interval)
    decomps = [
        diagnostics.explain_token(t, b_vocab, d_vocab, d_emb, config, dictionary=dictionary)
        for t in tokens
    ]
    if as_json:
        payload = [
            {"token": d.token, "shared": d.shared, "relative_residual": d.relative_residual,
             "terms": [[t, c] for t, c in d.terms]}
            for d in decomps
        ]
        click.echo(json.dumps(payload, ensure_ascii=False, indent=2))
    else:
        click.echo(diagnostics.render_table(decomps), nl=False)


@cli.command("scheme-report")
@click.option("--vocab", type=_path_in, required=True)
@click.option("--peer", type=_path_in, default=None, help="Second vocabulary to compare against.")
def scheme_report_cmd(vocab, peer):
    """Classify numeric tokenization schemes and flag a mismatch."""
    v = tensorio.load_vocabulary(vocab)
    p = tensorio.load_vocabulary(peer) if peer else None
    rep = diagnostics.numeric_scheme_report(v, p)
    click.echo(json.dumps(rep.to_dict(), indent=2, sort_keys=True))


@cli.command("coherence")
@click.option("--base-vocab", type=_path_in, required=True)
@click.option("--donor-emb", type=_path_in, required=True)
@click.option("--donor-vocab", type=_path_in, required=True)
@click.option("--sample", type=click.IntRange(min=1), default=None,
              help="Random atom pairs to check (default: all pairs).")
@click.option("--max-atoms", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
def coherence_cmd(base_vocab, donor_emb, donor_vocab, sample, max_atoms, seed):
    """Mutual coherence of the anchor dictionary."""
    b_vocab = tensorio.load_vocabulary(base_vocab)
    d_emb = tensorio.load_embeddings(donor_emb)
    d_vocab = tensorio.load_vocabulary(donor_vocab)
    d_vocab.check_pairing(d_emb)
    dictionary = build_dictionary(compute_overlap(b_vocab, d_vocab), d_emb,
                                  max_atoms=max_atoms, seed=seed)
    mu = diagnostics.dictionary_coherence(dictionary, sample=sample, seed=seed)
    click.echo(json.dumps({"atoms": dictionary.size, "coherence": mu,
                           "exact": sample is None}))


def _int_list(ctx, param, value):
    try:
        return tuple(int(x) for x in value.split(","))
    except ValueError:
        raise click.BadParameter("expected comma-separated integers")


@cli.command("synth")
@click.option("--dim", type=click.IntRange(min=1), default=256, show_default=True)
@click.option("--base-dim", type=click.IntRange(min=1), default=None)
@click.option("--dict", "dict_size", type=click.IntRange(min=1), default=4096, show_default=True,
              help="Number of shared anchor tokens.")
@click.option("--base-only", type=click.IntRange(min=0), default=512, show_default=True)
@click.option("--targets", type=click.IntRange(min=0), default=2000, show_default=True)
@click.option("--sparsity", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--k", "ks", default="8", callback=_int_list, show_default=True,
              help="Comma-separated sparsity budgets.")
@click.option("--noise", type=click.FloatRange(min=0), default=0.0, show_default=True)
@click.option("--methods", default="omp,zero,mean", show_default=True)
@click.option("--selection", type=click.Choice(["normalized", "raw"]), default="normalized")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--threads", type=click.IntRange(min=1), default=None)
@click.option("--out", type=_path_out, default=None, help="CSV path (default: stdout).")
@click.option("--format", "fmt", type=click.Choice(["csv", "text"]), default="csv")
@click.option("--timings/--no-timings", default=False,
              help="Fill the runtime_ms column (output is then not reproducible).")
def synth_cmd(dim, base_dim, dict_size, base_only, targets, sparsity, ks, noise, methods,
              selection, seed, threads, out, fmt, timings):
    """Synthetic benchmark against a known orthogonal map between spaces."""
    if any(k < 1 for k in ks):
        raise click.BadParameter("k values must be >= 1", param_hint="--k")
    spec = diagnostics.SynthSpec(dim=dim, dict_size=dict_size, targets=targets,
                                 sparsity=sparsity, noise=noise, base_only=base_only,
                                 base_dim=base_dim, seed=seed)
    rows = diagnostics.synth_benchmark(
        spec, [m.strip() for m in methods.split(",") if m.strip()], ks,
        SolverConfig(selection=selection), workers=resolve_workers(threads),
    )
    if fmt == "csv":
        text = diagnostics.bench_to_csv(rows, timings=timings)
    else:
        text = diagnostics.bench_to_text(rows)
    if out:
        tensorio.atomic_write_text(out, text)
    else:
        click.echo(text, nl=False)


@cli.command("inspect")
@click.argument("paths", nargs=-1, required=True, type=_path_in)
def inspect_cmd(paths):
    """Print EMBD header fields or vocabulary statistics as JSON lines."""
    for path in paths:
        with open(path, "rb") as fh:
            head = fh.read(4)
        if head == tensorio.MAGIC:
            info = {"path": path, "kind": "embd", **tensorio.read_header(path)}
        else:
            vocab = tensorio.load_vocabulary(path)
            ids = [vocab[t] for t in vocab]
            info = {
                "path": path,
                "kind": "vocab",
                "size": len(vocab),
                "min_id": min(ids) if ids else None,
                "max_id": max(ids) if ids else None,
                "contiguous": bool(ids) and max(ids) == len(ids) - 1,
            }
        click.echo(json.dumps(info, ensure_ascii=False))


def _fail(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    click.echo(f"error: {kind}: {msg}", err=True)
    return code


def run(argv: Optional[List[str]] = None) -> int:
    try:
        cli.main(args=argv, prog_name="tokensurgeon", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return _fail("aborted", RuntimeError("interrupted"), 1)
    except click.UsageError as exc:
        return _fail("usage", exc, 2)
    except click.ClickException as exc:
        return _fail("usage", exc, 2)
    except EmptyOverlapError as exc:
        return _fail("input", exc, 2)
    except BatchSolveError as exc:
        return _fail("solve", exc, 1)
    except INPUT_ERRORS as exc:
        return _fail("input", exc, 2)
    except Exception as exc:  # noqa: BLE001
        LOG.debug("internal error", exc_info=True)
        return _fail("internal", exc, 1)
    return 0


def main() -> None:
    sys.exit(run())
