"""
ReLU-count reduction for private-inference networks: graph IR, profiling,
culling/thinning/reshaping passes, a numpy training engine and the
candidate search pipeline
"""

# dunders
__author__ = "Andreas Zach"
__version__ = "0.1.0"

try:
    # 3rd party library imports
    import numpy as np
    import pandas as pd
    import scipy
    import tqdm
    import uncertainties

except ImportError:
    raise ImportError("Requirements not satisfied!")

else:
    # own library imports
    from . import ops
    from .errors import *
    from .netir import *
    from .architectures import *
    from .profiler import *
    from .passes import *
    from .merge import *
    from .data import *
    from .engine import *
    from .criticality import *
    from .latency import *
    from .pipeline import *
    from .config import *
    from .functions import *

    # define __all__
    from . import architectures, config, criticality, data, engine, errors, functions, latency, merge, netir, passes, pipeline, profiler

    __all__ = sorted(
        sum(
            (
                m.__all__
                for m in (errors, netir, architectures, profiler, passes, merge, data, engine, criticality, latency, pipeline, config, functions)
            ),
            [],
        )
        + ["np", "pd", "ops"]
    )  # type: ignore
    del scipy, tqdm, uncertainties
