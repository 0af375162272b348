"""Experiment configuration: flat key-value sections, INI style.

Sections and keys (defaults in parentheses):

[field]     kind = layered | circular | constant
            low, high        contrast values (constant: value)
            layered:  periods, offset_low, offset_high
                      stripe k of `periods` spans
                      [k/periods + offset_low, k/periods + offset_high)
            circular: grid, radius
                      disk centers ((2i+1)/(2 grid), (2j+1)/(2 grid))
[transport] diffusion_low (= field low), diffusion_high (= field high),
            porosity (1.0)
[problem]   case (1|2|3), n_fine, blocks, layers (integer or auto),
            tau (0.001), t_end (2.0), output_times (comma separated)
[source]    flow_amplitude (1.0), transport_amplitude (0.1),
            center_x (0.5), center_y (0.5), decay (40.0)
[initial]   kind = gaussian | zero | constant, amplitude (1.0),
            value (constant only); gaussian reuses the source center/decay
[run]       paper_scale (false), mem_budget_mb (1024), out (optional)
"""

import configparser
import hashlib

import numpy as np

from .. import fields, grid

__all__ = ["ExperimentConfig", "load_config"]

_FIELD_KINDS = ("layered", "circular", "constant")
_IC_KINDS = ("gaussian", "zero", "constant")


class ExperimentConfig:
    """Parsed and validated experiment description."""

    def __init__(self, raw, path=""):
        self.path = path
        f = raw["field"] if raw.has_section("field") else {}
        self.field_kind = f.get("kind", "constant")
        if self.field_kind not in _FIELD_KINDS:
            raise ValueError("unknown field kind %r" % self.field_kind)
        if self.field_kind == "constant":
            self.field_value = float(f.get("value", 1.0))
            self.low = self.high = self.field_value
        else:
            self.low = float(f.get("low", 1e-4))
            self.high = float(f.get("high", 1.0))
        if self.field_kind == "layered":
            self.periods = int(f.get("periods", 40))
            self.offset_low = float(f.get("offset_low", 0.007))
            self.offset_high = float(f.get("offset_high", 0.017))
        if self.field_kind == "circular":
            self.circle_grid = int(f.get("grid", 20))
            self.radius = float(f.get("radius", 0.015))

        t = raw["transport"] if raw.has_section("transport") else {}
        self.diffusion_low = float(t.get("diffusion_low", self.low))
        self.diffusion_high = float(t.get("diffusion_high", self.high))
        self.porosity = float(t.get("porosity", 1.0))

        p = raw["problem"] if raw.has_section("problem") else {}
        self.case = int(p.get("case", 1))
        self.n_fine = int(p.get("n_fine", 200))
        self.blocks = int(p.get("blocks", 10))
        layers = p.get("layers", "auto")
        self.layers = None if str(layers).strip() == "auto" else int(layers)
        self.tau = float(p.get("tau", 0.001))
        self.t_end = float(p.get("t_end", 2.0))
        times = p.get("output_times", "0.02, 0.1, 0.5, 1.0, 2.0")
        self.output_times = tuple(float(s) for s in times.split(","))
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.t_end < 0.0:
            raise ValueError("t_end must be nonnegative")
        bad = [x for x in self.output_times if not 0.0 <= x <= self.t_end]
        if bad:
            raise ValueError("output times outside [0, t_end]: %s" % bad)

        s = raw["source"] if raw.has_section("source") else {}
        self.flow_amplitude = float(s.get("flow_amplitude", 1.0))
        self.transport_amplitude = float(s.get("transport_amplitude", 0.1))
        self.source_center = (float(s.get("center_x", 0.5)),
                              float(s.get("center_y", 0.5)))
        self.source_decay = float(s.get("decay", 40.0))

        ic = raw["initial"] if raw.has_section("initial") else {}
        self.ic_kind = ic.get("kind", "gaussian")
        if self.ic_kind not in _IC_KINDS:
            raise ValueError("unknown initial kind %r" % self.ic_kind)
        self.ic_amplitude = float(ic.get("amplitude", 1.0))
        self.ic_value = float(ic.get("value", 0.0))

        r = raw["run"] if raw.has_section("run") else {}
        self.paper_scale = str(r.get("paper_scale", "false")).lower() in (
            "1", "true", "yes")
        self.mem_budget_mb = float(r.get("mem_budget_mb", 1024))
        self.out = r.get("out", "")

    @property
    def coarse_h(self):
        return 1.0 / self.blocks

    def resolved_layers(self):
        if self.layers is not None:
            return self.layers
        return grid.layers_for(self.coarse_h)

    def build_grids(self):
        return grid.build_grids(self.blocks, self.n_fine)

    def build_fields(self):
        """Permeability, continua, diffusion, porosity on the fine grid.

        The diffusion field shares the permeability geometry with its
        own two values.
        """
        if self.field_kind == "constant":
            kappa, cmap = fields.constant_field(self.n_fine, self.field_value)
            dvals = np.full(kappa.values.size, self.diffusion_low)
        elif self.field_kind == "layered":
            stripes = [(k / self.periods + self.offset_low,
                        k / self.periods + self.offset_high)
                       for k in range(self.periods)]
            kappa, cmap = fields.layered_field(self.n_fine, self.low,
                                               self.high, stripes)
            dvals = np.where(cmap.labels == 2, self.diffusion_high,
                             self.diffusion_low)
        else:
            g = self.circle_grid
            circles = [((2 * i + 1) / (2.0 * g), (2 * j + 1) / (2.0 * g),
                        self.radius) for j in range(g) for i in range(g)]
            kappa, cmap = fields.circular_field(self.n_fine, self.low,
                                                self.high, circles)
            dvals = np.where(cmap.labels == 2, self.diffusion_high,
                             self.diffusion_low)
        D = fields.CellField(dvals)
        phi = fields.CellField(np.full(dvals.size, self.porosity))
        return kappa, cmap, D, phi

    def boundary_case(self):
        return fields.BoundaryCase.case(self.case)

    def flow_source(self):
        return fields.SourceSpec(self.flow_amplitude, self.source_center,
                                 self.source_decay)

    def transport_source(self):
        return fields.SourceSpec(self.transport_amplitude, self.source_center,
                                 self.source_decay)

    def initial_nodal(self, fine):
        """Initial concentration at fine nodes."""
        if self.ic_kind == "zero":
            return np.zeros(fine.n_nodes)
        if self.ic_kind == "constant":
            return np.full(fine.n_nodes, self.ic_value)
        spec = fields.SourceSpec(self.ic_amplitude, self.source_center,
                                 self.source_decay)
        return spec.evaluate(fine.node_coords())

    def canonical_text(self):
        """Stable text form of every resolved setting, for hashing."""
        items = sorted((k, v) for k, v in vars(self).items() if k != "path")
        return "\n".join("%s=%r" % kv for kv in items)

    def config_hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def field_hash(self):
        """Hash of everything the cell bases depend on, for the cache."""
        keys = ["field_kind", "low", "high", "diffusion_low",
                "diffusion_high", "porosity", "n_fine", "blocks"]
        if self.field_kind == "layered":
            keys += ["periods", "offset_low", "offset_high"]
        if self.field_kind == "circular":
            keys += ["circle_grid", "radius"]
        text = "\n".join("%s=%r" % (k, getattr(self, k)) for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def differs_only_in_refinement(self, other):
        """True when the two configs agree except for blocks/layers."""
        skip = {"path", "blocks", "layers", "out"}
        a = {k: v for k, v in vars(self).items() if k not in skip}
        b = {k: v for k, v in vars(other).items() if k not in skip}
        return a == b


def load_config(path):
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as f:
        parser.read_file(f)
    return ExperimentConfig(parser, path=str(path))
