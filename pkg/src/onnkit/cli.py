"""Command-line pipeline: design, estimate, train, fabricate, calibrate, compensate, analyze."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt
from . import config as cfgmod
from .data import bin2x, gen_synthetic_seg, load_cifar10_bin, load_mnist
from .errors import ConfigError, OnnkitError, StageOrderError
from .layout import FrontendDesign, compute_layout, dense_backend, design_to_netspec
from .metrics import (CostModel, energy_estimate, evaluate, evaluate_network, export_features, mac_count,
                      write_epochs_csv)
from .net import NetworkSpec, OptimizerHyper, build_network, forward
from .ntk import (RegressionSetup, conv_jacobian, encode_targets, estimate_performance, gram_spectrum,
                  ntk_perturbation_experiment, ntk_regress, reference_kernels, select_lambda)
from .optics import (FabricatedFrontend, FabricationNoiseSpec, ablate_random, calibrate, capture, compensate,
                     evaluate_fabricated, fabricate, frontend_kernels, optical_conv_ideal)
from .presets import lenet_teacher, seg_student, seg_teacher
from .train import TeacherHandle, TrainConfig, label_weights, mask_weights, pretrain_teacher, train_student

log = logging.getLogger("onnkit")

STAGES = ("design", "estimate", "pretrain-teacher", "train", "fabricate", "calibrate", "compensate",
          "ablate-random", "analyze", "eval", "export-features", "pipeline")
ANALYSES = ("spectrum", "ntk-scaling", "macs")
PIPELINE = ("design", "estimate", "pretrain-teacher", "train", "fabricate", "calibrate", "compensate",
            "ablate-random", "analyze spectrum", "analyze ntk-scaling", "analyze macs", "eval",
            "export-features")


# ---------------------------------------------------------------------------
# shared plumbing


class Run:
    """Resolved configuration plus the output directory of one invocation."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self._data = None

    def path(self, name: str) -> Path:
        return self.out / name

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
        return p

    def snapshot(self, stage: str) -> None:
        self.path(f"resolved-config.{stage.replace(' ', '-')}.txt").write_text(cfgmod.dump(self.cfg))

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageOrderError(f"{p} is missing; run `{stage}` first")
        return p

    @property
    def task(self) -> str:
        return "segmentation" if self.cfg["dataset"] == "synthetic_seg" else "classification"

    def data(self):
        """(train_x, train_y, test_x, test_y) as seen by the networks."""
        if self._data is None:
            c = self.cfg
            if c["dataset"] == "mnist":
                root = c["mnist_dir"] or None
                tr, te = load_mnist("train", root), load_mnist("test", root)
            elif c["dataset"] == "cifar10":
                if not (c["cifar_train"] and c["cifar_test"]):
                    raise ConfigError("cifar10 needs cifar_train and cifar_test paths")
                tr = load_cifar10_bin(c["cifar_train"].split(","))
                te = load_cifar10_bin(c["cifar_test"].split(","))
            else:
                tr = gen_synthetic_seg(c["n_train"], c["seg_resolution"], c["seed"])
                te = gen_synthetic_seg(c["n_test"], c["seg_resolution"], c["seed"] + 1_000_003)
            tr, te = tr.head(c["n_train"]), te.head(c["n_test"])
            if self.task == "segmentation":
                # the sensor bins 2x2; the network upsamples back to mask resolution
                self._data = (bin2x(tr.images), tr.targets, bin2x(te.images), te.targets)
            else:
                self._data = (tr.images, tr.targets, te.images, te.targets)
        return self._data

    def design(self) -> FrontendDesign:
        c = self.cfg
        channels = 1 if c["dataset"] == "mnist" else 3
        return FrontendDesign(c["surface_h_mm"], c["surface_w_mm"], c["kernel_size_mm"], c["min_spacing_mm"],
                              c["kernel_px"], channels)

    def student_spec(self) -> NetworkSpec:
        design = self.design()
        layout = compute_layout(design)
        c = self.cfg
        if self.task == "segmentation":
            backend = seg_student(max(layout.n_kernels, 1), c["kernel_px"]).layers[1:]
            spec = design_to_netspec(design, layout, backend, "same")
        else:
            image = self.data()[0].shape[-1]
            backend = dense_backend(layout.n_kernels, design.kernel_px, image, cfgmod.int_list(c["hidden"]))
            spec = design_to_netspec(design, layout, backend)
        return NetworkSpec(spec.layers, c["parameterization"], spec.frontend_split)

    def teacher_spec(self) -> NetworkSpec:
        if self.task == "segmentation":
            return seg_teacher(self.cfg["teacher_width"])
        x = self.data()[0]
        return lenet_teacher(self.cfg["teacher_hidden"], x.shape[-1], x.shape[1])

    def train_config(self, strategy=None, epochs=None, lr=None, beta=None) -> TrainConfig:
        c = self.cfg
        return TrainConfig(strategy=strategy or c["strategy"], alpha=c["alpha"],
                           beta=c["beta"] if beta is None else beta, temperature=c["temperature"],
                           epochs=c["epochs"] if epochs is None else epochs, batch_size=c["batch_size"],
                           seed=c["seed"], optimizer=OptimizerHyper(c["optimizer"], c["lr"] if lr is None else lr),
                           ntk_normalization=c["ntk_normalization"], scalarization=self._scalarization())

    def _scalarization(self) -> str:
        # segmentation outputs are pixel maps: the scalar per sample is their mean, or the signed mask margin
        scal = self.cfg["scalarization"]
        if self.task == "segmentation" and scal != "label_outputs":
            return "mean_outputs"
        return scal

    def noise(self) -> FabricationNoiseSpec:
        c = self.cfg
        return FabricationNoiseSpec(c["alpha_cal"], (c["shift_x"], c["shift_y"]), c["beta_cal"],
                                    c["delta_sigma"], c["epsilon_sigma"], c["fab_seed"])

    def teacher(self) -> TeacherHandle:
        p = self.require("teacher.ckpt", "pretrain-teacher")
        report = json.loads(self.path("teacher_report.json").read_text())
        return TeacherHandle(ckpt.load_network(p), self.task, report["metric"])

    def frontend(self) -> FabricatedFrontend:
        p = self.require("frontend.ckpt", "fabricate")
        tensors = ckpt.load_tensors(p)
        meta = json.loads(self.path("fabrication.json").read_text())
        noise = FabricationNoiseSpec(meta["alpha_cal"], tuple(meta["shift_px"]), meta["beta_cal"],
                                     meta["delta_sigma"], meta["epsilon_sigma"], meta["seed"])
        return FabricatedFrontend(tensors["IDEAL.kernels"], tensors[f"{ckpt.REALIZED_PREFIX}.kernels"], noise,
                                  meta["padding_mode"])


def _report(rep) -> dict:
    out = rep.summary()
    out["metric"] = rep.metric
    return out


# ---------------------------------------------------------------------------
# stages


def stage_design(run: Run) -> dict:
    layout = compute_layout(run.design())
    run.write_json("layout.json", layout.to_dict())
    print(f"layout: {layout.n_cols} cols x {layout.n_rows} rows = {layout.n_kernels} kernels")
    for x, y in layout.centers_mm:
        print(f"  centre ({x:.3f}, {y:.3f}) mm")
    return layout.to_dict()


def stage_estimate(run: Run) -> dict:
    c = run.cfg
    xtr, ytr, xte, yte = run.data()
    xtr, ytr, xte, yte = xtr[:c["est_train"]], ytr[:c["est_train"]], xte[:c["est_test"]], yte[:c["est_test"]]
    grid = tuple(cfgmod.float_list(c["lambda_grid"])) or None
    kind = c["ref_kind"]
    kernel_args = {"width_scale": c["width_scale"], "n_seeds": c["n_seeds"], "kernel_px": c["kernel_px"]}
    if kind in ("analytic_fc", "auto"):
        kernel_args["depth"] = c["ref_depth"]
    spec = None if kind == "analytic_fc" else NetworkSpec(run.student_spec().layers, "ntk", 1)
    if run.task == "segmentation":
        K_tt, K_st, name = reference_kernels(spec, xtr, xte, kind, seed=c["seed"], **kernel_args)
        setup = RegressionSetup(lambda_grid=grid, target_encoding="raw")
        lam, val = select_lambda(K_tt, ytr.reshape(len(ytr), -1), setup, c["val_fraction"], c["seed"])
        pred = ntk_regress(K_tt, K_st, encode_targets(ytr, "raw", 2), lam)
        rep = evaluate(pred.reshape(yte.shape), yte, "segmentation")
        result = {"lambda_star": lam, "val_metric": -val, "test_metric": rep.metric, "reference": name}
    else:
        setup = RegressionSetup(lambda_grid=grid, n_classes=int(max(ytr.max(), yte.max())) + 1)
        result = estimate_performance(spec, xtr, ytr, xte, yte, setup, kind, c["val_fraction"], c["seed"],
                                      **kernel_args).to_dict()
    run.write_json("estimate.json", result)
    print(f"estimated test metric {result['test_metric']:.4f} (lambda* = {result['lambda_star']:.3e})")
    return result


def stage_pretrain_teacher(run: Run) -> dict:
    c = run.cfg
    xtr, ytr, xte, yte = run.data()
    config = run.train_config("e2e", c["teacher_epochs"], c["teacher_lr"])
    handle, rep = pretrain_teacher(run.teacher_spec(), xtr, ytr, xte, yte, run.task, config)
    ckpt.save_network(run.path("teacher.ckpt"), handle.network)
    write_epochs_csv(rep, run.path("teacher_epochs.csv"))
    out = _report(rep)
    run.write_json("teacher_report.json", out)
    print(f"teacher {rep.metric_name} {rep.metric:.4f}")
    return out


def stage_train(run: Run) -> dict:
    c = run.cfg
    xtr, ytr, xte, yte = run.data()
    teacher = run.teacher() if c["strategy"] != "e2e" else None
    student = build_network(run.student_spec(), c["seed"])
    net, rep = train_student(student, teacher, xtr, ytr, xte, yte, run.task, run.train_config())
    ckpt.save_network(run.path("student.ckpt"), net)
    write_epochs_csv(rep, run.path("student_epochs.csv"))
    out = _report(rep)
    out["strategy"] = c["strategy"]
    run.write_json("student_report.json", out)
    print(f"student ({c['strategy']}) {rep.metric_name} {rep.metric:.4f}")
    return out


def stage_fabricate(run: Run) -> dict:
    net = ckpt.load_network(run.require("student.ckpt", "train"))
    noise = run.noise()
    padding = net.spec.layers[0].padding_mode
    front = fabricate(frontend_kernels(net), noise, padding)
    ckpt.save_tensors(run.path("frontend.ckpt"), {"IDEAL.kernels": front.ideal_kernels,
                                                  f"{ckpt.REALIZED_PREFIX}.kernels": front.realized_kernels})
    meta = {"alpha_cal": noise.alpha_cal, "beta_cal": noise.beta_cal, "shift_px": list(noise.shift_px),
            "delta_sigma": noise.delta_sigma, "epsilon_sigma": noise.epsilon_sigma, "seed": noise.seed,
            "padding_mode": padding, "realized_sha256": front.digest()}
    run.write_json("fabrication.json", meta)
    print(f"fabricated {len(front.ideal_kernels)} kernels, realized digest {front.digest()[:16]}")
    return meta


def stage_calibrate(run: Run) -> dict:
    front = run.frontend()
    x = run.data()[2][:200]
    measured = capture(front, x)
    simulated = optical_conv_ideal(x, front.ideal_kernels, front.padding_mode)
    cal = calibrate(measured, simulated)
    out = cal.to_dict()
    run.write_json("calibration.json", out)
    print(f"calibration: gain {cal.gain:.4f}, shift ({cal.shift[0]}, {cal.shift[1]})")
    return out


def stage_compensate(run: Run) -> dict:
    c = run.cfg
    front = run.frontend()
    net = ckpt.load_network(run.require("student.ckpt", "train"))
    teacher = run.teacher() if c["comp_strategy"] != "e2e" else None
    xtr, ytr, xte, yte = run.data()
    simulated = evaluate_network(net, xte, yte, run.task).metric
    uncompensated = evaluate_fabricated(net, front, xte, yte, run.task).metric
    before = ckpt.file_digest(run.path("frontend.ckpt"))
    frontend_params = {k: v.copy() for k, v in net.split()[0].params.items()}
    config = run.train_config(c["comp_strategy"], c["comp_epochs"], c["comp_lr"], c["comp_beta"])
    new, rep = compensate(net, front, teacher, xtr, ytr, xte, yte, run.task, config, c["comp_fraction"])
    unchanged = all(np.array_equal(new.params[k], v) for k, v in frontend_params.items())
    ckpt.save_network(run.path("compensated.ckpt"), new)
    write_epochs_csv(rep, run.path("compensation_epochs.csv"))
    out = {"strategy": c["comp_strategy"], "simulated_metric": simulated, "uncompensated_metric": uncompensated,
           "compensated_metric": rep.metric, "frontend_unchanged": unchanged,
           "frontend_sha256": before, "confusion": rep.confusion.tolist()}
    run.write_json("compensation_report.json", out)
    print(f"simulated {simulated:.4f}, fabricated {uncompensated:.4f}, compensated ({c['comp_strategy']}) "
          f"{rep.metric:.4f}")
    return out


def stage_ablate_random(run: Run) -> dict:
    c = run.cfg
    if run.task != "classification":
        raise ConfigError("ablate-random runs on classification datasets")
    xtr, ytr, xte, yte = run.data()
    xtr, ytr, xte, yte = xtr[:c["ablate_train"]], ytr[:c["ablate_train"]], xte[:c["ablate_test"]], yte[:c["ablate_test"]]
    rows = ablate_random(cfgmod.int_list(c["ablate_kernels"]), xtr, ytr, xte, yte,
                         run.train_config("e2e", c["ablate_epochs"]), tuple(cfgmod.float_list(c["ablate_lrs"])),
                         c["kernel_px"], c["val_fraction"], c["seed"])
    for row in rows:
        print(f"{row['n_kernels']:5d} random kernels: accuracy {row['accuracy']:.4f} (lr {row['lr']:g})")
    est = estimate_performance(None, xtr, ytr, xte, yte, RegressionSetup(), "random_conv", c["val_fraction"],
                               c["seed"], kernel_px=c["kernel_px"])
    print(f"  inf random kernels (kernel regression): accuracy {est.test_metric:.4f}")
    out = {"rows": rows, "infinite": est.to_dict()}
    run.write_json("ablation.json", out)
    return out


def stage_spectrum(run: Run) -> dict:
    teacher = run.teacher()
    n = run.cfg["spectrum_samples"]
    x, y = run.data()[0][:n], run.data()[1][:n]
    scal = run._scalarization()
    if scal == "label_outputs":
        scal = mask_weights(y) if run.task == "segmentation" else label_weights(y, forward(teacher.network, x[:1]).shape[1])
    elif scal == "projected_outputs":
        scal = "sum_outputs"
    J = conv_jacobian(teacher.network, x, scal)
    spec = gram_spectrum(J)
    with open(run.path("spectrum.csv"), "w") as fh:
        fh.write("eigenindex,eigenvalue,cumulative\n")
        for i, (e, cum) in enumerate(zip(spec.eigenvalues, spec.cumulative_power)):
            fh.write(f"{i},{e!r},{cum!r}\n")
    out = {"conv_params": J.shape[1], "samples": J.shape[0],
           "counts_at": {str(k): v for k, v in spec.counts_at.items()}}
    run.write_json("spectrum.json", out)
    print(f"{spec.counts_at[0.95]} of {J.shape[1]} conv parameters carry 95% of the Gram power")
    return out


def stage_ntk_scaling(run: Run) -> dict:
    c = run.cfg
    res = ntk_perturbation_experiment(cfgmod.int_list(c["scaling_widths"]), c["delta_norm"],
                                      c["scaling_trials"], c["seed"])
    with open(run.path("ntk_scaling.csv"), "w") as fh:
        fh.write("m,mean_dtheta,std\n")
        for m, mean, std in res.rows():
            fh.write(f"{m},{mean!r},{std!r}\n")
    run.write_json("ntk_scaling.json", {"slope": res.slope})
    print(f"log-log slope of |dTheta| vs width: {res.slope:.3f}")
    return {"slope": res.slope}


def stage_macs(run: Run) -> dict:
    c = run.cfg
    spec = run.student_spec()
    shape = run.data()[0].shape[1:]
    full = mac_count(spec, shape, "full")
    backend = mac_count(spec, shape, "backend_only")
    teacher = mac_count(run.teacher_spec(), shape, "full")
    hybrid = CostModel(c["energy_per_mac_j"], c["energy_per_capture_j"])
    digital = CostModel(c["energy_per_mac_j"], c["digital_capture_j"])
    out = {"student_full_macs": full, "student_backend_macs": backend, "teacher_macs": teacher,
           "hybrid_energy_j": energy_estimate(backend, 1, hybrid),
           "digital_energy_j": energy_estimate(full, 1, digital),
           "teacher_energy_j": energy_estimate(teacher, 1, digital)}
    run.write_json("macs.json", out)
    print(f"MACs: full {full}, backend {backend}; energy hybrid {out['hybrid_energy_j']:.3e} J, "
          f"digital {out['digital_energy_j']:.3e} J")
    return out


def stage_eval(run: Run, checkpoint=None) -> dict:
    p = Path(checkpoint) if checkpoint else run.require("student.ckpt", "train")
    net = ckpt.load_network(p)
    _, _, xte, yte = run.data()
    rep = evaluate_network(net, xte, yte, run.task)
    out = _report(rep)
    out["checkpoint"] = p.name
    run.write_json("eval_report.json", out)
    print(f"{p.name}: {rep.metric_name} {rep.metric:.4f}")
    return out


def stage_export_features(run: Run, checkpoint=None) -> dict:
    p = Path(checkpoint) if checkpoint else run.require("student.ckpt", "train")
    net = ckpt.load_network(p)
    _, _, xte, yte = run.data()
    n = export_features(net, xte, yte, run.path("features.csv"))
    print(f"wrote {n} feature rows to {run.path('features.csv')}")
    return {"rows": n}


HANDLERS = {
    "design": stage_design, "estimate": stage_estimate, "pretrain-teacher": stage_pretrain_teacher,
    "train": stage_train, "fabricate": stage_fabricate, "calibrate": stage_calibrate,
    "compensate": stage_compensate, "ablate-random": stage_ablate_random,
    "analyze spectrum": stage_spectrum, "analyze ntk-scaling": stage_ntk_scaling, "analyze macs": stage_macs,
    "eval": stage_eval, "export-features": stage_export_features,
}


def run_stage(run: Run, stage: str, **kw):
    log.info("stage %s", stage)
    result = HANDLERS[stage](run, **kw)
    run.snapshot(stage)
    return result


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _global_flags(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="flat key = value config file")
    parser.add_argument("--set", action="append", default=d, metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--seed", type=int, default=d)
    parser.add_argument("--threads", type=int, default=d, help="BLAS threads; 1 implies --deterministic")
    parser.add_argument("--deterministic", action="store_true", default=d)
    parser.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="onnkit", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES:
        p = sub.add_parser(name)
        _global_flags(p, suppress=True)
        if name == "analyze":
            p.add_argument("analysis", choices=ANALYSES)
        if name in ("eval", "export-features"):
            p.add_argument("--checkpoint", default=None, help="defaults to student.ckpt in the output directory")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        flags = {"out": args.out, "seed": args.seed, "threads": args.threads,
                 "deterministic": True if args.deterministic else None}
        cfg = cfgmod.resolve(args.config, args.set or (), **flags)
        run = Run(cfg)
        with threadpool_limits(limits=cfg["threads"]):
            if args.command == "pipeline":
                for stage in PIPELINE:
                    run_stage(run, stage)
                run.snapshot("pipeline")
            elif args.command == "analyze":
                run_stage(run, f"analyze {args.analysis}")
            elif args.command in ("eval", "export-features"):
                run_stage(run, args.command, checkpoint=args.checkpoint)
            else:
                run_stage(run, args.command)
    except OnnkitError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
