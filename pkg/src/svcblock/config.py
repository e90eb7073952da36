"""INI run configuration.

Relative paths are resolved against the directory of the config file.
``auto`` means "use the data-driven default".
"""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .diagnostics import McmcConfig
from .geo import PLOT_AREA_HA
from .model import Dataset, ModelSpec, Priors, default_priors
from .prediction import DEFAULT_MAX_JOINT
from .selection import DEFAULT_COND_THRESHOLD, SelectionConfig
from .simulate import SimulationConfig, Truth


class ConfigError(ValueError):
    pass


DEFAULTS = f"""\
[run]
seed = 2021
workers = auto
output_dir = output

[paths]
plots = plots.csv
polygons = blowdowns.geojson
raster_dir = rasters

[model]
models = nonspatial, svi, svc
predict_model = svc
predictors = auto
nu = 0.5

[priors]
sigma2_shape = 2.0
sigma2_scale = auto
tau2_shape = 2.0
tau2_scale = auto
phi_lower = auto
phi_upper = auto

[mcmc]
n_chains = 3
n_iterations = 25000
burn_in = 5000
thinning = 5
target_accept = auto
adapt_interval = 100

[selection]
candidates = all
cond_threshold = {DEFAULT_COND_THRESHOLD:g}

[diagnostics]
loo = true
dic_plugin = transformed

[prediction]
cell_area_ha = {PLOT_AREA_HA}
level = 0.95
max_joint = {DEFAULT_MAX_JOINT}
max_draws = 0

[simulate]
n_plots = 62
n_blowdowns = 40
n_subregions = 5
extent_km = 3.0
raster_cell_m = 5.0
plot_radius_km = 0.02
blowdown_median_ha = 0.3
beta0 = {Truth.beta0}
beta1 = {Truth.beta1}
sigma2_0 = {Truth.sigma2_0}
phi_0 = {Truth.phi_0}
sigma2_1 = {Truth.sigma2_1}
phi_1 = {Truth.phi_1}
tau2 = {Truth.tau2}
"""


def _list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


@dataclass
class RunConfig:
    seed: int
    workers: int
    output_dir: Path
    plots: Path
    polygons: Path
    raster_dir: Path
    models: list
    predict_model: str
    predictors: list | None
    nu: float
    prior_overrides: dict
    mcmc: McmcConfig
    selection: SelectionConfig
    candidates: list | None
    loo: bool
    dic_plugin: str
    cell_area: float
    level: float
    max_joint: int
    max_draws: int
    simulation: SimulationConfig
    source: str = field(default="", repr=False)

    @classmethod
    def from_string(cls, text, base_dir=Path(".")):
        cp = configparser.ConfigParser()
        cp.read_string(DEFAULTS)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        known = configparser.ConfigParser()
        known.read_string(DEFAULTS)
        for section in cp.sections():
            if not known.has_section(section):
                raise ConfigError(f"unknown config section [{section}]")
            for key in cp[section]:
                if key not in known[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
        base_dir = Path(base_dir)
        try:
            return cls._build(cp, base_dir, text)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"invalid config value: {exc}") from None

    @classmethod
    def _build(cls, cp, base, text):
        def path(section, key):
            p = Path(cp[section][key])
            return p if p.is_absolute() else base / p

        def auto_float(section, key):
            v = cp[section][key].strip().lower()
            return None if v == "auto" else float(v)

        predictors = cp["model"]["predictors"].strip()
        models = _list(cp["model"]["models"])
        for m in models + [cp["model"]["predict_model"]]:
            ModelSpec.from_name(m, 0)
        workers_text = cp["run"]["workers"].strip().lower()
        workers = (os.cpu_count() or 1) if workers_text == "auto" else max(int(workers_text), 1)
        target = cp["mcmc"]["target_accept"].strip().lower()
        mcmc = McmcConfig(
            n_chains=cp.getint("mcmc", "n_chains"),
            n_iterations=cp.getint("mcmc", "n_iterations"),
            burn_in=cp.getint("mcmc", "burn_in"),
            thinning=cp.getint("mcmc", "thinning"),
            seed=cp.getint("run", "seed"),
            target_accept=None if target == "auto" else float(target),
            adapt_interval=cp.getint("mcmc", "adapt_interval"),
            workers=workers,
        )
        cands = cp["selection"]["candidates"].strip()
        s = cp["simulate"]
        truth = Truth(**{k: float(s[k]) for k in
                         ("beta0", "beta1", "sigma2_0", "phi_0", "sigma2_1", "phi_1", "tau2")},
                      nu=float(cp["model"]["nu"]))
        sim = SimulationConfig(int(s["n_plots"]), int(s["n_blowdowns"]), int(s["n_subregions"]),
                               float(s["extent_km"]), float(s["raster_cell_m"]),
                               float(s["plot_radius_km"]), float(s["blowdown_median_ha"]), truth)
        level = cp.getfloat("prediction", "level")
        if not 0 < level < 1:
            raise ConfigError("prediction.level must lie in (0, 1)")
        cell_area = cp.getfloat("prediction", "cell_area_ha")
        if not cell_area > 0:
            raise ConfigError("prediction.cell_area_ha must be positive")
        plugin = cp["diagnostics"]["dic_plugin"].strip()
        if plugin not in ("transformed", "mean"):
            raise ConfigError("diagnostics.dic_plugin must be 'transformed' or 'mean'")
        seed_text = cp["run"]["seed"].strip()
        if not seed_text:
            raise ConfigError("run.seed is mandatory")
        return cls(
            seed=int(seed_text),
            workers=workers,
            output_dir=path("run", "output_dir"),
            plots=path("paths", "plots"),
            polygons=path("paths", "polygons"),
            raster_dir=path("paths", "raster_dir"),
            models=models,
            predict_model=cp["model"]["predict_model"].strip(),
            predictors=None if predictors.lower() == "auto" else _list(predictors),
            nu=cp.getfloat("model", "nu"),
            prior_overrides={k: auto_float("priors", k) for k in cp["priors"]},
            mcmc=mcmc,
            selection=SelectionConfig(cp.getfloat("selection", "cond_threshold"), workers),
            candidates=None if cands.lower() == "all" else _list(cands),
            loo=cp.getboolean("diagnostics", "loo"),
            dic_plugin=plugin,
            cell_area=cell_area,
            level=level,
            max_joint=cp.getint("prediction", "max_joint"),
            max_draws=cp.getint("prediction", "max_draws"),
            simulation=sim,
            source=text,
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_string(path.read_text(), path.parent)

    def require(self, *names):
        """Check that the named input paths exist."""
        for name in names:
            p = getattr(self, name)
            if not p.exists():
                raise ConfigError(f"{name} path {p} does not exist")

    @property
    def default_prior_family(self) -> bool:
        """True when no prior setting deviates from the data-driven defaults."""
        o = self.prior_overrides
        return (o["sigma2_shape"] == 2.0 and o["tau2_shape"] == 2.0
                and all(o[k] is None for k in ("sigma2_scale", "tau2_scale", "phi_lower",
                                                "phi_upper")))

    def priors_for(self, ds: Dataset, spec: ModelSpec) -> Priors:
        o = self.prior_overrides
        pri = default_priors(ds, spec)
        sig = [(o["sigma2_shape"], o["sigma2_scale"] or b) for _, b in pri.sigma2]
        phi = [(o["phi_lower"] or lo, o["phi_upper"] or hi) for lo, hi in pri.phi]
        tau = (o["tau2_shape"], o["tau2_scale"] or pri.tau2[1])
        return Priors(sigma2=sig, phi=phi, tau2=tau, beta=None)


def with_predictors(text: str, predictors) -> str:
    """Config text with ``[model] predictors`` replaced."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    if not cp.has_section("model"):
        cp.add_section("model")
    cp["model"]["predictors"] = ", ".join(predictors)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
