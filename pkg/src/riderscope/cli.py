"""Command-line entry point (``riderscope``)."""
from __future__ import annotations

import json
import logging
import shutil
import sys
import zipfile
from dataclasses import replace
from pathlib import Path

import click

from riderscope import analytics, labels, pipeline, resources
from riderscope.cfg import annotate, build_cfg, fingerprint_module, render_cfg
from riderscope.dex.parser import parse_dex
from riderscope.diff import CutoffConfig
from riderscope.errors import RiderscopeError
from riderscope.ingest import load_manifest
from riderscope.store import Store, default_store_path, dumps
from riderscope.synth import generate, load_spec
from riderscope.taxonomy import Taxonomy

log = logging.getLogger("riderscope")


class Ctx:
    def __init__(self, cutoff, resource_cutoff, min_family_size, threads, seed, store):
        self.cutoff = cutoff
        self.resource_cutoff = resource_cutoff
        self.min_family_size = min_family_size
        self.threads = threads
        self.seed = seed
        self.store = store

    def config(self, cutoff=None, **overrides) -> pipeline.PipelineConfig:
        kw = {}
        if cutoff is not None or self.cutoff is not None:
            kw["hco"] = cutoff if cutoff is not None else self.cutoff
        if self.resource_cutoff is not None:
            kw["resource_cutoff"] = self.resource_cutoff
        if self.min_family_size is not None:
            kw["min_family_size"] = self.min_family_size
        base = CutoffConfig()
        hco = kw.get("hco", base.hco)
        if hco < base.mco:
            # keep the curve bands ordered below a low rider cutoff
            shrink = hco / base.mco
            kw.update(mco=hco, lco=base.lco * shrink, gco=base.gco * shrink)
        cut = CutoffConfig(**kw)
        return pipeline.PipelineConfig(cutoffs=cut, threads=self.threads, **overrides)


def _fail(exc: RiderscopeError):
    stage = exc.context.get("stage")
    prefix = f"[{stage}] " if stage else ""
    raise click.ClickException(f"{prefix}{exc.code}: {exc.message}")


def _open_store(ctx: Ctx, store_opt, out):
    """Input store plus an optional output: a directory (new store) or a CSV path."""
    src = Store(store_opt or ctx.store or default_store_path())
    if not src.root.exists():
        raise click.ClickException(f"store {src.root} does not exist")
    if out is None or Path(out).suffix.lower() in (".csv", ".json", ".txt"):
        return src, out
    return src.copy_to(Store(out)), None


def _export(store: Store, rel: str, out):
    if out:
        shutil.copyfile(store.path(rel), out)
        click.echo(f"wrote {out}")


def _run(store: Store, stage: str, cfg):
    try:
        pipeline.run_stage(stage, store, cfg)
    except RiderscopeError as exc:
        _fail(exc)


def _load_dex(path: str, member: str):
    data = Path(path).read_bytes()
    if data[:4] == b"PK\x03\x04":
        with zipfile.ZipFile(path) as zf:
            data = zf.read(member)
    try:
        return parse_dex(data)
    except RiderscopeError as exc:
        _fail(exc)


@click.group()
@click.option("--cutoff", type=click.FloatRange(0, 1, min_open=True), default=None,
              help="Method-sharing cutoff (HCO), default 0.90.")
@click.option("--resource-cutoff", type=click.FloatRange(0, 1, min_open=True), default=None,
              help="Resource prevalence cutoff, default 0.30.")
@click.option("--min-family-size", type=click.IntRange(2), default=None, help="Smallest family analyzed (7).")
@click.option("--threads", type=click.IntRange(1), default=1, show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides the seed of a synth spec.")
@click.option("--store", "store", type=click.Path(file_okay=False), default=None,
              help="Store directory (env RIDERSCOPE_STORE).")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, cutoff, resource_cutoff, min_family_size, threads, seed, store, verbose):
    """Differential analysis of repackaged Android malware families."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = Ctx(cutoff, resource_cutoff, min_family_size, threads, seed, store)


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Store directory to create.")
@click.option("--max-depth", type=click.IntRange(0), default=3, show_default=True)
@click.pass_obj
def ingest(obj: Ctx, manifest, out, max_depth):
    """Parse the manifest and walk every archive."""
    store = Store(out or obj.store or default_store_path())
    cfg = obj.config()
    cfg.max_depth = max_depth
    try:
        pipeline.run_stage("ingest", store, cfg, manifest)
    except RiderscopeError as exc:
        _fail(exc)
    rows = store.read_jsonl("diagnostics/ingest.jsonl")
    n = sum(1 for _ in store.read_jsonl("samples.jsonl"))
    click.echo(f"{n} samples, {len(rows)} diagnostics -> {store.root}")


@main.command("labels")
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--stopwords", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--min-agreement", type=click.IntRange(1), default=2, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Write JSONL here instead of stdout.")
@click.pass_obj
def labels_cmd(obj: Ctx, manifest, stopwords, min_agreement, out):
    """Derive one family per sample from vendor labels."""
    words = labels.load_stopwords(stopwords) if stopwords else labels.DEFAULT_STOPWORDS
    if manifest:
        try:
            records, diags = load_manifest(manifest)
        except RiderscopeError as exc:
            _fail(exc)
        for d in diags:
            click.echo(f"{d.code}: {d.message}", err=True)
        rows = [{"sample_id": r.sample_id,
                 "family": r.family or labels.normalize_family(r.av_labels, words, min_agreement)} for r in records]
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
        if out:
            Path(out).write_text(text)
        else:
            click.echo(text, nl=False)
        return
    store, _ = _open_store(obj, None, None)
    _run(store, "labels", obj.config(stopwords=words, min_agreement=min_agreement))
    if out:
        shutil.copyfile(store.path("labels.jsonl"), out)


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--member", default="classes.dex", show_default=True, help="Member to read when PATH is an archive.")
def dexdump(path, member):
    """List the classes, methods and instructions of a Dalvik executable."""
    module = _load_dex(path, member)
    click.echo(f"dex version {module.version}, {len(module.classes)} classes, {len(module.methods)} method refs")
    for cls in module.classes:
        click.echo(f"class {cls.descriptor} extends {cls.superclass}")
        for em in cls.methods:
            ref = module.methods[em.method_idx]
            proto = module.protos[ref.proto]
            click.echo(f"  method {ref.name}({''.join(proto.parameters)}){proto.return_type} "
                       f"flags=0x{em.access_flags:x}")
            if em.body is None:
                continue
            for insn in em.body.instructions:
                extra = ""
                if insn.ref is not None and insn.op.ref == "method":
                    extra = " " + module.method_name(insn.ref)
                elif insn.ref is not None and insn.op.ref == "string":
                    extra = " " + json.dumps(module.strings[insn.ref])
                elif insn.targets:
                    extra = " " + ", ".join(f"@{t:04x}" for t in insn.targets)
                regs = ", ".join(str(o) for o in insn.operands)
                click.echo(f"    {insn.offset:04x}: {insn.name} {regs}{extra}")
    for d in module.diagnostics:
        click.echo(f"{d.code}: {d.message}", err=True)


@main.command("cfg")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.argument("class_name", required=False)
@click.argument("method_name", required=False)
@click.option("--member", default="classes.dex", show_default=True)
@click.option("--exceptional-edges", is_flag=True)
def cfg_cmd(path, class_name, method_name, member, exceptional_edges):
    """Print the basic-block CFG of each method, optionally filtered by CLASS and METHOD."""
    module = _load_dex(path, member)
    if class_name and not class_name.startswith("L"):
        class_name = "L" + class_name.replace(".", "/") + ";"
    for cls, em in module.bodies():
        ref = module.methods[em.method_idx]
        if class_name and cls.descriptor != class_name:
            continue
        if method_name and ref.name != method_name:
            continue
        full = f"{cls.descriptor}->{ref.name}"
        try:
            g = annotate(build_cfg(em.body, exceptional_edges), module)
        except RiderscopeError as exc:
            click.echo(f"{full}: {exc.code}: {exc.message}", err=True)
            continue
        click.echo(full)
        click.echo(render_cfg(g, module), nl=False)


@main.command()
@click.argument("path", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--member", default="classes.dex", show_default=True)
@click.option("--corpus", "store_opt", type=click.Path(file_okay=False), default=None, help="Input store.")
@click.option("--out", type=click.Path(), default=None, help="Output store directory.")
@click.pass_obj
def fingerprint(obj: Ctx, path, member, store_opt, out):
    """Fingerprint one file (PATH) or every sample in a store."""
    if path:
        for p in fingerprint_module(_load_dex(path, member)):
            click.echo(f"{p.fingerprint.hex}  {p.class_name}->{p.method_name}  {{{', '.join(p.tokens)}}}")
        return
    store, _ = _open_store(obj, store_opt, out)
    _run(store, "fingerprint", obj.config())


@main.command("diff")
@click.option("--prints", "store_opt", type=click.Path(file_okay=False), default=None, help="Input store.")
@click.option("--cutoff", type=click.FloatRange(0, 1, min_open=True), default=None)
@click.option("--curve", is_flag=True, help="Print the prevalence curve of each family.")
@click.option("--out", type=click.Path(), default=None, help="Output store directory or riders CSV.")
@click.pass_obj
def diff_cmd(obj: Ctx, store_opt, cutoff, curve, out):
    """Per-family prevalence, rider sets and early-stage flags."""
    store, csv_out = _open_store(obj, store_opt, out)
    _run(store, "diff", obj.config(cutoff))
    fams = store.read_json("families.json")
    for fam in fams["retained"]:
        p = pipeline.load_profile(store, fam)
        flag = " early-stage" if p["early_stage"] else ""
        click.echo(f"{fam}: {p['size']} samples, {p['total_distinct_methods']} methods, "
                   f"{len(p['riders'])} riders at {p['cutoff']}{flag}")
        if curve:
            for share, count in p["curve"]:
                click.echo(f"  {share:.4f},{count}")
    for fam, n in fams["excluded_small"].items():
        click.echo(f"{fam}: excluded ({n} samples)")
    _export(store, "riders.csv", csv_out)


@main.command()
@click.option("--riders", "store_opt", type=click.Path(file_okay=False), default=None, help="Input store.")
@click.option("--taxonomy", "taxonomy_file", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(), default=None, help="Output store directory or behaviors CSV.")
@click.pass_obj
def behaviors(obj: Ctx, store_opt, taxonomy_file, out):
    """Behavior categories of each family's riders and the corpus table."""
    store, csv_out = _open_store(obj, store_opt, out)
    tax = Taxonomy.from_file(taxonomy_file) if taxonomy_file else Taxonomy()
    _run(store, "behaviors", obj.config(taxonomy=tax))
    click.echo(store.path("behaviors.csv").read_text(), nl=False)
    _export(store, "behaviors.csv", csv_out)


@main.command("resources")
@click.option("--corpus", "store_opt", type=click.Path(file_okay=False), default=None, help="Input store.")
@click.option("--cutoff", type=click.FloatRange(0, 1, min_open=True), default=None)
@click.option("--vocabulary", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", type=click.Path(), default=None, help="Output store directory or resources CSV.")
@click.pass_obj
def resources_cmd(obj: Ctx, store_opt, cutoff, vocabulary, out):
    """Common ELF and script resources per family."""
    store, csv_out = _open_store(obj, store_opt, out)
    cfg = obj.config(vocabulary=resources.load_vocabulary(vocabulary) if vocabulary else resources.SCRIPT_VOCABULARY)
    if cutoff is not None:
        cfg.cutoffs = replace(cfg.cutoffs, resource_cutoff=cutoff)
    _run(store, "resources", cfg)
    click.echo(store.path("resources.csv").read_text(), nl=False)
    _export(store, "resources.csv", csv_out)


@main.command("analytics")
@click.option("--corpus", "store_opt", type=click.Path(file_okay=False), default=None, help="Input store.")
@click.option("--top", type=click.Choice(["largest", "prevalent", "viral", "stealthy"]), default=None)
@click.option("-k", type=click.IntRange(1), default=10, show_default=True)
@click.option("--timeline", "features", multiple=True, help="Feature: API token or CATEGORY. Repeatable.")
@click.option("--cutoff", type=click.FloatRange(0, 1, min_open=True), default=None)
@click.option("--out", type=click.Path(), default=None, help="Timeline CSV path (single feature).")
@click.pass_obj
def analytics_cmd(obj: Ctx, store_opt, top, k, features, cutoff, out):
    """Family rankings and quarterly feature prevalence."""
    store, _ = _open_store(obj, store_opt, None)
    overrides = {"top_k": k}
    if features:
        overrides["timeline_features"] = tuple(features)
    cfg = obj.config(cutoff, **overrides)
    _run(store, "analytics", cfg)
    if top:
        ranked = store.read_json("analytics/top.json").get(top, [])
        click.echo(f"top {k} {top}: " + ", ".join(ranked))
    timelines = store.read_json("analytics/timelines.json")
    for feature in features:
        t = timelines[feature]
        click.echo(f"# {feature} (cutoff {t['cutoff']})")
        click.echo("quarter,fraction,active_families")
        for p in t["points"]:
            click.echo(f"{p['quarter']},{p['fraction']!r},{p['active_families']}")
        if t["fit"]:
            click.echo(f"# fit: slope={t['fit']['slope']!r} intercept={t['fit']['intercept']!r}")
        if out and len(features) == 1:
            series = analytics.QuarterSeries(feature, t["cutoff"], [
                (analytics.parse_quarter(p["quarter"]), p["fraction"]) for p in t["points"]],
                (t["fit"]["slope"], t["fit"]["intercept"]) if t["fit"] else None,
                {analytics.parse_quarter(p["quarter"]): p["active_families"] for p in t["points"]})
            out_store = Store(Path(out).parent)
            pipeline.write_timeline_csv(out_store, Path(out).name, series)


@main.command()
@click.option("--family", "families", multiple=True, help="Family to report (default: all analyzed).")
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text", show_default=True)
@click.option("--corpus", "store_opt", type=click.Path(file_okay=False), default=None, help="Input store.")
@click.pass_obj
def report(obj: Ctx, families, fmt, store_opt):
    """Case-study report per family."""
    store, _ = _open_store(obj, store_opt, None)
    cfg = obj.config()
    targets = families or tuple(pipeline._reportable(store))
    for fam in targets:
        try:
            data, text = pipeline.write_report(store, fam, cfg)
        except RiderscopeError as exc:
            _fail(exc)
        click.echo(dumps(data) if fmt == "json" else text, nl=False)
    store.reindex()


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def synth(obj: Ctx, spec_path, out):
    """Generate a synthetic corpus with ground truth."""
    spec = load_spec(spec_path)
    if obj.seed is not None:
        spec["seed"] = obj.seed
    try:
        manifest = generate(spec, out)
    except RiderscopeError as exc:
        _fail(exc)
    click.echo(str(manifest))


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Store directory.")
@click.pass_obj
def run(obj: Ctx, manifest, out):
    """Run the full pipeline."""
    store = Store(out or obj.store or default_store_path())
    try:
        status, summary = pipeline.run_pipeline(manifest, store, obj.config())
    except RiderscopeError as exc:
        _fail(exc)
    fam = summary["families"]
    click.echo(f"{summary['samples']} samples ({summary['malformed']} malformed); families: {fam['retained']} retained, "
               f"{fam['excluded_small']} below minimum size, {fam['early_stage']} early-stage -> {store.root}")
    sys.exit(status)


if __name__ == "__main__":
    main()
