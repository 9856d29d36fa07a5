"""Command-line driver: generate, spectrum, analyze, slices.

Configuration is one flat JSON object shared by all subcommands.  Values
come from, in increasing priority: built-in defaults, the ``--config`` file,
then explicit flags.  A manifest written by an earlier run is accepted as a
config file, which reproduces that run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, report, spectrum, synthetic
from .analysis import AnalysisConfig, DeformationField, analyze_volume
from .spectrum import NoBandError
from .synchrosqueeze import AnalysisError
from .synthetic import LatticeType, PolycrystalSpec, SpecError
from .volume_io import ScalarVolume, export_field_slices, load_volume, save_volume

EXIT_OK, EXIT_VALIDATION, EXIT_ANALYSIS = 0, 2, 3

DEFAULTS = {
    "input": None,
    "output_dir": None,
    "preset": None,
    "spec": None,            # full PolycrystalSpec dict; overrides preset
    "dims": 64,
    "N": None,
    "noise_var": 0.0,
    "seed": 0,
    "format": "npy",
    "lattice": None,         # None: the preset's lattice, else cubic
    "s": 0.5,
    "c_w": 2.0,
    "lb": None,
    "eps_rel": 0.1,
    "eta": 0.7,
    "delta_cells": 3.0,
    "band": None,
    "kappa": 2.0,
    "debias": True,
    "threads": None,
    "axis": 3,
    "stride": 1,
    "figures": True,
}


class UsageError(ValueError):
    pass


def _parse_band(text: str):
    try:
        r1, r2 = (float(t) for t in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"band must look like r1:r2, got {text!r}") from exc
    if not 0 <= r1 < r2:
        raise argparse.ArgumentTypeError(f"band needs 0 <= r1 < r2, got {text!r}")
    return [r1, r2]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crystalsst",
                                description="Synchrosqueezed wave packet analysis of 3D crystal images.")
    p.add_argument("--version", action="version", version=f"crystalsst {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    # defaults are SUPPRESS so that only flags given on the command line override the config
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config or a previous manifest")
        sp.add_argument("--output-dir", dest="output_dir", default=S)
        sp.add_argument("--threads", type=int, default=S)
        sp.add_argument("--no-figures", dest="figures", action="store_false", default=S)

    g = sub.add_parser("generate", help="write a synthetic polycrystal and its ground truth")
    common(g)
    g.add_argument("--preset", choices=synthetic.PRESETS, default=S)
    g.add_argument("--dims", type=int, default=S)
    g.add_argument("--N", type=float, default=S)
    g.add_argument("--lattice", choices=[t.value for t in LatticeType], default=S)
    g.add_argument("--noise-var", dest="noise_var", type=float, default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--format", choices=["npy", "f64raw"], default=S)

    def analysis_flags(sp):
        sp.add_argument("--input", default=S)
        sp.add_argument("--band", type=_parse_band, default=S, help="override detection, r1:r2")
        sp.add_argument("--lattice", choices=[t.value for t in LatticeType], default=S)

    s = sub.add_parser("spectrum", help="radially averaged spectrum and band report")
    common(s)
    analysis_flags(s)

    a = sub.add_parser("analyze", help="full pipeline: defect mass, G, R, U, Euler angles")
    common(a)
    analysis_flags(a)
    a.add_argument("--s", type=float, default=S)
    a.add_argument("--c-w", dest="c_w", type=float, default=S)
    a.add_argument("--lb", type=int, default=S)
    a.add_argument("--eps-rel", dest="eps_rel", type=float, default=S)
    a.add_argument("--eta", type=float, default=S)
    a.add_argument("--delta-cells", dest="delta_cells", type=float, default=S)
    a.add_argument("--kappa", type=float, default=S)
    a.add_argument("--no-debias", dest="debias", action="store_false", default=S)
    a.add_argument("--preset", choices=synthetic.PRESETS, default=S,
                   help="analyze a generated preset instead of --input")
    a.add_argument("--dims", type=int, default=S)
    a.add_argument("--noise-var", dest="noise_var", type=float, default=S)
    a.add_argument("--seed", type=int, default=S)

    sl = sub.add_parser("slices", help="export 2D slices of a volume")
    common(sl)
    sl.add_argument("--input", default=S)
    sl.add_argument("--axis", type=int, choices=[1, 2, 3], default=S)
    sl.add_argument("--stride", type=int, default=S)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if "config" in loaded and "version" in loaded:  # a manifest
            loaded = loaded["config"]
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in DEFAULTS:
            cfg[k] = v
    if not cfg["output_dir"]:
        raise UsageError("--output-dir is required")
    return cfg


def _write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    man = {"version": __version__, "command": command, "config": cfg}
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str))


def _sha256(data: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(data, dtype="<f8").tobytes()).hexdigest()


def _polycrystal_spec(cfg: dict) -> PolycrystalSpec:
    if cfg["spec"] is not None:
        spec = PolycrystalSpec.from_dict(cfg["spec"])
    elif cfg["preset"]:
        spec = synthetic.preset(cfg["preset"], dims=int(cfg["dims"]), N=cfg["N"],
                                noise_var=float(cfg["noise_var"]), seed=int(cfg["seed"]))
    else:
        raise UsageError("generate needs --preset or a config with a 'spec' entry")
    if cfg["lattice"]:
        spec.lattice = LatticeType(cfg["lattice"])
    spec.validate()
    return spec


def _input_volume(cfg: dict) -> tuple[ScalarVolume, str]:
    if cfg["input"]:
        vol = load_volume(cfg["input"])
        return vol, str(cfg["input"])
    if cfg.get("preset"):
        spec = _polycrystal_spec(cfg)
        vol, _ = synthetic.generate_polycrystal(spec)
        cfg["lattice"] = cfg["lattice"] or spec.lattice.value
        return vol, f"preset:{cfg['preset']}"
    raise UsageError("--input is required")


def _analysis_config(cfg: dict) -> AnalysisConfig:
    ac = AnalysisConfig(eps_rel=float(cfg["eps_rel"]), eta=float(cfg["eta"]),
                        delta_cells=float(cfg["delta_cells"]), lattice=LatticeType(cfg["lattice"] or "cubic"),
                        s=float(cfg["s"]), c_w=float(cfg["c_w"]), lb=cfg["lb"],
                        band=tuple(cfg["band"]) if cfg["band"] else None,
                        kappa=float(cfg["kappa"]), debias=bool(cfg["debias"]),
                        threads=cfg["threads"])
    ac.validate()
    return ac


def cmd_generate(cfg: dict, out: Path) -> list[str]:
    spec = _polycrystal_spec(cfg)
    vol, gt = synthetic.generate_polycrystal(spec)
    suffix = ".npy" if cfg["format"] == "npy" else ".f64raw"
    save_volume(vol, out / f"volume{suffix}")
    truth = out / "ground_truth"
    truth.mkdir(exist_ok=True)
    np.save(truth / "grain_id.npy", gt.grain_id.astype(np.int32))
    for name in ("defect_mask", "boundary_mask", "seam_mask"):
        np.save(truth / f"{name}.npy", getattr(gt, name).astype(np.uint8))
    np.save(truth / "G.npy", gt.G)
    (truth / "defect_sites.json").write_text(json.dumps([list(map(float, p)) for p in gt.defect_sites]))
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2))
    if cfg["figures"]:
        report.plot_slice_overview(vol.data, 3, out / "volume_x3.png")
    _write_manifest(out, "generate", cfg, {"volume_sha256": _sha256(vol.data)})
    return [f"volume\t{out / ('volume' + suffix)}", f"sha256\t{_sha256(vol.data)}"]


def _spectrum_and_band(vol: ScalarVolume, cfg: dict):
    spec = spectrum.forward_fourier(vol, workers=cfg["threads"])
    floor = spectrum.noise_floor(spec)
    E = spectrum.radial_power_spectrum(spec, floor=floor)
    if cfg["band"]:
        r1, r2 = cfg["band"]
        band = spectrum.Band(float(r1), float(r2), spectrum.estimate_wavenumber(E, (r1, r2)))
    else:
        band = spectrum.dominant_band(E)
    return E, band, floor


def cmd_spectrum(cfg: dict, out: Path) -> list[str]:
    vol, src = _input_volume(cfg)
    E, band, floor = _spectrum_and_band(vol, cfg)
    (out / "spectrum.tsv").write_text(E.to_text())
    lines = [f"band\t{band.r1:.4g}:{band.r2:.4g}", f"N\t{band.wavenumber:.6g}",
             f"noise_floor\t{floor:.6g}"]
    (out / "band.txt").write_text("\n".join(lines) + "\n")
    if cfg["figures"]:
        report.plot_spectrum(E, band, out / "spectrum.png")
    _write_manifest(out, "spectrum", cfg, {"input": src, "input_sha256": _sha256(vol.data)})
    return lines


def save_deformation_field(df: DeformationField, out: Path) -> None:
    """Write mass, defect mask, the nine G components, R, U and the three angles as .npy.

    Fields live on the L_B^3 analysis grid; R and U are stored whole as
    (L_B, L_B, L_B, 3, 3).  G, R, U and the angles are NaN on defects.
    """
    out.mkdir(parents=True, exist_ok=True)
    save_volume(df.mass, out / "mass.npy")
    np.save(out / "defect.npy", df.defect.astype(np.uint8))
    for i in range(3):
        for j in range(3):
            np.save(out / f"G_{i + 1}{j + 1}.npy", np.ascontiguousarray(df.G[..., i, j]))
    np.save(out / "R.npy", df.R)
    np.save(out / "U.npy", df.U)
    for k, name in enumerate(("alpha", "beta", "gamma")):
        np.save(out / f"{name}.npy", np.ascontiguousarray(df.euler[..., k]))


def cmd_analyze(cfg: dict, out: Path) -> list[str]:
    vol, src = _input_volume(cfg)
    ac = _analysis_config(cfg)
    df = analyze_volume(vol, ac)
    save_deformation_field(df, out / "field")
    E = df.info.pop("radial_spectrum")
    (out / "spectrum.tsv").write_text(E.to_text())
    lines = report.summary_lines(df)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    info = {k: v for k, v in df.info.items()}
    info["euler_modes"] = report.modal_euler_triples(df)
    (out / "summary.json").write_text(json.dumps(info, indent=2, default=float))
    if cfg["figures"]:
        band = spectrum.Band(df.info["band"][0], df.info["band"][1], df.info["N"])
        report.plot_spectrum(E, band, out / "spectrum.png")
        report.plot_mass(df, out / "mass.png")
        report.plot_euler(df, out / "euler.png")
    _write_manifest(out, "analyze", cfg, {"input": src, "input_sha256": _sha256(vol.data)})
    return lines


def cmd_slices(cfg: dict, out: Path) -> list[str]:
    if not cfg["input"]:
        raise UsageError("--input is required")
    vol = load_volume(cfg["input"])
    paths = export_field_slices(vol, int(cfg["axis"]), int(cfg["stride"]), out)
    if cfg["figures"]:
        report.plot_slice_overview(vol.data, int(cfg["axis"]), out / f"overview_{cfg['axis']}.png")
    _write_manifest(out, "slices", cfg, {"input_sha256": _sha256(vol.data)})
    return [f"slices\t{len(paths)}"]


COMMANDS = {"generate": cmd_generate, "spectrum": cmd_spectrum,
            "analyze": cmd_analyze, "slices": cmd_slices}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        cfg = resolve_config(args)
        out = Path(cfg["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        lines = COMMANDS[args.command](cfg, out)
    except (AnalysisError, NoBandError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except (UsageError, SpecError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for line in lines:
        print(line)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
