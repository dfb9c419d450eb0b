"""Cycle-approximate simulator and mini graph compiler for an
orchestrated-dataflow NPU.

The usual round trip:

    ir = graph.load_graph(text)
    prog = compiler.compile_graph(ir, MachineConfig(), tpbs=4)
    result = engine.run_compiled(MachineConfig(), prog, input_bytes)

`oracle` holds the pure-numpy reference the machine is tested against,
`trace` renders runs for chrome://tracing, and `cli` wraps the lot for the
command line.
"""

from npusim.config import MachineConfig, load_config, with_overrides
from npusim.engine import Engine, run_compiled
from npusim.graph import load_graph, load_graph_file

__version__ = "0.1.0"

__all__ = ["Engine", "MachineConfig", "load_config", "load_graph",
           "load_graph_file", "run_compiled", "with_overrides",
           "__version__"]
