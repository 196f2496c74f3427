#pragma once

#include "d3lmpc/errors.hpp"
#include "d3lmpc/topology.hpp"
#include "d3lmpc/trajectory.hpp"
#include "d3lmpc/plant.hpp"
#include "d3lmpc/datalog.hpp"
#include "d3lmpc/response.hpp"
#include "d3lmpc/densesolve.hpp"
#include "d3lmpc/localsls.hpp"
#include "d3lmpc/consensus.hpp"
#include "d3lmpc/oracle.hpp"
#include "d3lmpc/bench.hpp"
