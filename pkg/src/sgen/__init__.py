"""Multi-scale noise-robust face restoration with sequential gating ensembles.

Kept import-light so the CLI can bound BLAS threads before numpy loads;
import submodules (sgen.autodiff, sgen.model, sgen.train, ...) directly.
"""

__version__ = "0.1.0"
