"""Planning, tracking and robustness certification for hook-based aerial
payload grasping from a moving ground vehicle.

Subpackage layout:

* :mod:`hookplan.model` -- quadrotor + rod + payload rigid-body model
* :mod:`hookplan.prediction` -- ground-vehicle / payload motion forecast
* :mod:`hookplan.ocp`, :mod:`hookplan.sqp`, :mod:`hookplan.qp` -- grasp
  trajectory optimization (complementarity-constrained OCP, SQP solver,
  interior-point QP backend)
* :mod:`hookplan.tracker` -- finite-horizon LTV-LQR synthesis
* :mod:`hookplan.lfr`, :mod:`hookplan.iqc`, :mod:`hookplan.sdp`,
  :mod:`hookplan.analysis` -- worst-case hook position error certification
* :mod:`hookplan.scenario`, :mod:`hookplan.simulate`,
  :mod:`hookplan.experiments`, :mod:`hookplan.outputs`,
  :mod:`hookplan.cli` -- scenario files, closed-loop simulation, batch
  experiments and the command line interface
"""

from hookplan.model import ManipulatorParams

__all__ = ["ManipulatorParams"]
__version__ = "0.1.0"
