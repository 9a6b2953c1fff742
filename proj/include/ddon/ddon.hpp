#pragma once

// Everything: geometry, grids, the FD oracle, GP boundary data, operator nets,
// DDM schemes, application pipelines and the CLI layer.

#include "ddon/errors.hpp"
#include "ddon/rng.hpp"
#include "ddon/geometry.hpp"
#include "ddon/grid.hpp"
#include "ddon/oracle_solver.hpp"
#include "ddon/gp_boundary.hpp"
#include "ddon/neuralop.hpp"
#include "ddon/ddm_engine.hpp"
#include "ddon/pipeline_apps.hpp"
#include "ddon/cli_io.hpp"
