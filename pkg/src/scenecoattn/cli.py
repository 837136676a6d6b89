"""Command-line entry point: synth-data, build-graph, train, eval, infer, repl, gradcheck.

Exit codes: 0 success, 1 usage, 2 data/validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from . import datasynth, metrics, relgraph, trainer
from . import model as M
from .checkpoint import CheckpointError, load_checkpoint
from .frontend import SUGGEST_MARKER, Scene, SceneFormatError, SceneObject, detokenize
from .gradcheck import grad_check
from .tensor import NonFiniteError, Tape

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("scenecoattn")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config files

def load_flat_config(path) -> dict:
    """JSON object with flat dotted keys, e.g. {"model.d_model": 32, "train.lr": 1e-3}."""
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise DataError(f"{path}: expected a JSON object")
    for key in obj:
        head = key.split(".", 1)[0]
        if head not in ("model", "train", "paths", "seed") or (head != "seed" and "." not in key):
            raise DataError(f"{path}: unknown config key '{key}'")
    return obj


def _section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


# ------------------------------------------------------------------ helpers

def _read_graph(path) -> relgraph.OccurrenceCounts:
    try:
        return relgraph.OccurrenceCounts.load(path)
    except FileNotFoundError:
        raise DataError(f"graph file not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _read_corpus(path) -> datasynth.Corpus:
    if not (Path(path) / "corpus_meta.json").is_file():
        raise DataError(f"no corpus at {path} (corpus_meta.json missing)")
    try:
        return datasynth.load_corpus(path)
    except (SceneFormatError, ValueError) as exc:
        raise DataError(str(exc)) from None


def _read_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


def _segments(ids: Sequence[int], vocab) -> tuple[str, str | None]:
    desc, fired, sugg = metrics.split_output(ids, vocab)
    return " ".join(desc), (" ".join(sugg) if fired else None)


# ------------------------------------------------------------------ subcommands

def cmd_synth_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    try:
        spec = datasynth.WorldSpec.load(args.spec) if args.spec else datasynth.default_world()
    except FileNotFoundError:
        raise DataError(f"world spec not found: {args.spec}") from None
    except datasynth.WorldSpecError as exc:
        raise DataError(str(exc)) from None
    corpus = datasynth.generate(spec, args.n, args.seed)
    datasynth.write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)}/{len(corpus.val)}/{len(corpus.test)} train/val/test scenes "
          f"({len(corpus.vocab)} tokens) to {args.out}")
    return EXIT_OK


def _class_names(spec: str) -> list[str] | int:
    if spec.isdigit():
        return int(spec)
    try:
        obj = json.loads(Path(spec).read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise DataError(f"--classes: cannot read {spec} ({exc})") from None
    names = obj.get("class_names") if isinstance(obj, dict) else obj
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise DataError(f"--classes: {spec} must hold a list of class names")
    return names


def cmd_build_graph(args) -> int:
    classes = _class_names(args.classes)
    names = None if isinstance(classes, int) else classes
    n = classes if isinstance(classes, int) else len(classes)
    if n < 1:
        raise UsageError("--classes must name at least one class")
    counts = relgraph.OccurrenceCounts(n, class_names=names or [])
    try:
        lines = Path(args.frames).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"frames file not found: {args.frames}") from None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{args.frames}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
        present = obj.get("classes_present") if isinstance(obj, dict) else None
        if not isinstance(present, list) or not all(isinstance(c, int) and not isinstance(c, bool) for c in present):
            raise DataError(f"{where}: expected {{\"classes_present\": [int, ...]}}")
        try:
            counts.observe_frame(present)
        except IndexError as exc:
            raise DataError(f"{where}: {exc}") from None
    counts.save(args.out)
    print(f"observed {counts.frames_seen} frames over {n} classes; wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_flat_config(args.config) if args.config else {}
    paths = _section(cfg, "paths")
    corpus_dir = args.corpus or paths.get("corpus")
    graph_path = args.graph or paths.get("graph")
    out_dir = args.out or paths.get("out")
    if not corpus_dir or not out_dir:
        raise UsageError("train needs a corpus and an output directory (paths.corpus / paths.out or flags)")
    corpus = _read_corpus(corpus_dir)     # fail before any training work

    model_kw = _section(cfg, "model")
    if args.ablate_graph:
        model_kw["ablate_graph"] = True
    train_kw = _section(cfg, "train")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is not None:
        train_kw["seed"] = seed
    if args.steps is not None:
        train_kw["max_steps"] = args.steps
    if args.lr is not None:
        train_kw["lr"] = args.lr
    try:
        model_cfg = M.ModelConfig(vocab_size=len(corpus.vocab), n_classes=len(corpus.class_names), **model_kw)
        train_cfg = trainer.TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad config: {exc}") from None

    if graph_path:
        matrix = relgraph.build_matrix(_read_graph(graph_path))
    elif model_cfg.ablate_graph:
        matrix = None
    else:
        raise UsageError("train needs --graph (or paths.graph) unless --ablate-graph is set")

    result = trainer.train(corpus.train, corpus.vocab, matrix, model_cfg, train_cfg,
                           val_scenes=corpus.val, out_dir=out_dir)
    print(f"trained {train_cfg.max_steps} steps; final loss {result.final_loss:.4f}; "
          f"checkpoint {Path(out_dir) / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg, vocab, stored = _read_checkpoint(args.checkpoint)
    corpus = _read_corpus(args.corpus)
    if corpus.vocab.tokens != vocab.tokens:
        raise DataError("corpus vocabulary does not match the checkpoint vocabulary")
    if args.ablate_graph and not cfg.ablate_graph:
        raise DataError("--ablate-graph needs a checkpoint trained with --ablate-graph")
    matrix = relgraph.build_matrix(_read_graph(args.graph)) if args.graph else stored
    report = metrics.evaluate(params, cfg, vocab, corpus.split(args.split), matrix, args.split)
    if args.report:
        Path(args.report).write_text(report.dumps() + "\n")
    print(report.dumps() if args.json else metrics.render_table([report]))
    return EXIT_OK


def _read_scene_file(path, n_classes: int) -> list[Scene]:
    """One JSON object, a JSON list, or JSONL; target/expects_trigger may be omitted."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"scene file not found: {path}") from None
    try:
        obj = json.loads(text)
        items = [(None, o) for o in (obj if isinstance(obj, list) else [obj])]
    except json.JSONDecodeError:
        items = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if line.strip():
                try:
                    items.append((lineno, json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    scenes = []
    for lineno, o in items:
        if isinstance(o, dict):
            o = {"target": "-", "expects_trigger": False, **o}
        try:
            scenes.append(Scene.from_dict(o, n_classes))
        except SceneFormatError as exc:
            where = f"{path}:{lineno}" if lineno else str(path)
            raise DataError(f"{where}: {exc}") from None
    return scenes


def cmd_infer(args) -> int:
    params, cfg, vocab, stored = _read_checkpoint(args.checkpoint)
    scenes = _read_scene_file(args.scene, cfg.n_classes)
    matrix = relgraph.build_matrix(_read_graph(args.graph)) if args.graph else stored
    outputs = M.predict(params, scenes, vocab, matrix, cfg)
    for scene, ids in zip(scenes, outputs):
        text = detokenize(ids, vocab)
        if args.json:
            desc, sugg = _segments(ids, vocab)
            print(json.dumps({"scene_id": scene.scene_id, "output": text, "description": desc,
                              "suggestion": sugg}, sort_keys=True))
        else:
            print(f"{scene.scene_id}: {text}")
    return EXIT_OK


def inline_scene(tokens: Sequence[str], class_names: Sequence[str], index: int) -> Scene:
    """Scene from an object list; boxes are laid out on a fixed 4x4 grid."""
    objects = []
    for i, tok in enumerate(tokens):
        if tok.isdigit():
            cid = int(tok)
        elif tok in class_names:
            cid = list(class_names).index(tok)
        else:
            raise ValueError(f"unknown object '{tok}'")
        if not 0 <= cid < len(class_names):
            raise ValueError(f"unknown object '{tok}'")
        if i >= 16:
            raise ValueError("at most 16 inline objects")
        objects.append(SceneObject(cid, (0.05 + 0.25 * (i % 4), 0.05 + 0.25 * (i // 4), 0.15, 0.15)))
    if not objects:
        raise ValueError("no objects given")
    return Scene(f"inline{index}", objects, "", "-", False)


def run_repl(params, cfg, vocab, matrix, scenes_by_id: dict[str, Scene], class_names: Sequence[str],
             stdin: TextIO, stdout: TextIO, prompt: TextIO | None = None) -> int:
    """Read (scene line, instruction line) pairs until ':quit' or EOF."""
    def ask(text):
        if prompt is not None:
            prompt.write(text)
            prompt.flush()
        line = stdin.readline()
        return None if line == "" else line.rstrip("\n")

    turn = 0
    while True:
        line = ask("scene> ")
        if line is None or line.strip() == ":quit":
            return EXIT_OK
        line = line.strip()
        if not line:
            continue
        if line.startswith("objects:"):
            try:
                scene = inline_scene(line[len("objects:"):].split(), class_names, turn)
            except ValueError as exc:
                stdout.write(f"error: {exc}\n")
                continue
        elif line in scenes_by_id:
            scene = scenes_by_id[line]
        else:
            stdout.write(f"unknown scene id '{line}'\n")
            continue
        instruction = ask("instruction> ")
        if instruction is None or instruction.strip() == ":quit":
            return EXIT_OK
        turn += 1
        scene = Scene(scene.scene_id, scene.objects, instruction, scene.target, scene.expects_trigger)
        ids = M.predict(params, [scene], vocab, matrix, cfg)[0]
        desc, sugg = _segments(ids, vocab)
        stdout.write(f"[{scene.scene_id}] {desc}\n")
        stdout.write(f"  {SUGGEST_MARKER} {sugg}\n" if sugg is not None else "  (no suggestion)\n")
        stdout.flush()


def cmd_repl(args) -> int:
    params, cfg, vocab, stored = _read_checkpoint(args.checkpoint)
    matrix = relgraph.build_matrix(_read_graph(args.graph)) if args.graph else stored
    scenes, class_names = {}, datasynth.default_world().class_names
    if args.corpus:
        corpus = _read_corpus(args.corpus)
        scenes = {s.scene_id: s for s in corpus.scenes}
        class_names = corpus.class_names
    if len(class_names) != cfg.n_classes:
        class_names = [str(i) for i in range(cfg.n_classes)]
    prompt = sys.stderr if sys.stdin.isatty() else None
    return run_repl(params, cfg, vocab, matrix, scenes, class_names, sys.stdin, sys.stdout, prompt)


GRADCHECK_MODEL = {"d_model": 16, "n_heads": 2, "d_ff": 32, "d_v": 16, "d_r": 8, "dropout": 0.0}


def gradcheck_problem(model_overrides: dict | None = None, data_seed: int = 0):
    """(loss function, float64 params, config) for a two-scene full-model check."""
    corpus = datasynth.generate(datasynth.default_world(), 10, data_seed)
    scenes = corpus.train[:2]
    matrix = relgraph.build_matrix(relgraph.OccurrenceCounts(len(corpus.class_names))
                                   .observe_frames(datasynth.build_history(corpus)))
    cfg = M.ModelConfig(vocab_size=len(corpus.vocab), n_classes=len(corpus.class_names),
                        **{**GRADCHECK_MODEL, **(model_overrides or {})})
    batch = M.make_batch(scenes, corpus.vocab, matrix, cfg, dtype=np.float64)
    params = M.init_params(cfg, seed=data_seed, precision="float64")
    return (lambda P: M.loss(P, batch, cfg)), params, cfg


def cmd_gradcheck(args) -> int:
    cfg = load_flat_config(args.config) if args.config else {}
    try:
        f, params, _ = gradcheck_problem(_section(cfg, "model"), args.seed)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad config: {exc}") from None
    factory = Tape
    if args.corrupt_backward:
        factory = lambda: Tape(corrupt={args.corrupt_backward: 1.5})
    report = grad_check(f, params, h=args.h, tol=args.tol, n_samples=args.samples, seed=args.seed,
                        tape_factory=factory)
    missing = sorted(set(params) - report.tensors_covered())
    ok = report.passed and not missing
    if args.json:
        print(json.dumps({"passed": ok, "max_rel_error": report.max_rel_error, "tol": args.tol,
                          "coordinates": len(report.checked), "tensors": len(report.tensors_covered()),
                          "uncovered": missing, "flagged": [list(map(str, f)) for f in report.flagged]},
                         sort_keys=True))
    else:
        print(report.summary())
        if missing:
            print(f"tensors without a checked coordinate: {', '.join(missing)}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenecoattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate a synthetic scene corpus")
    s.add_argument("--spec", help="world spec JSON (default: built-in kitchen world)")
    s.add_argument("--n", type=int, default=600, help="number of scenes")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("build-graph", help="count class co-occurrence over a frame stream")
    s.add_argument("--frames", required=True, help='JSONL, one {"classes_present": [...]} per line')
    s.add_argument("--classes", required=True, help="class count, or JSON file with class names")
    s.add_argument("--out", required=True, help="graph snapshot JSON")
    s.set_defaults(fn=cmd_build_graph)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="JSON with flat dotted keys (model.*, train.*, paths.*, seed)")
    s.add_argument("--corpus")
    s.add_argument("--graph")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--ablate-graph", action="store_true", help="replace the relation token by a learned constant")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="trigger P/R/F1 and description BLEU on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--graph", help="override the graph stored in the checkpoint")
    s.add_argument("--ablate-graph", action="store_true", help="assert the checkpoint is the ablated variant")
    s.add_argument("--report", help="also write the JSON report here")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("infer", help="describe scenes from a JSON/JSONL file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--graph")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("repl", help="interactive scene + instruction loop")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--graph")
    s.add_argument("--corpus", help="corpus directory for scene-id lookup and class names")
    s.set_defaults(fn=cmd_repl)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    s.add_argument("--config", help="JSON with model.* overrides")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--json", action="store_true")
    s.add_argument("--corrupt-backward", metavar="OP", help=argparse.SUPPRESS)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneFormatError, relgraph.GraphFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, trainer.NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
