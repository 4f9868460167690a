#pragma once

#include "valgate/errors.hpp"
#include "valgate/trajectory_store.hpp"
#include "valgate/value_head.hpp"
#include "valgate/metrics.hpp"
#include "valgate/difficulty.hpp"
#include "valgate/td_trainer.hpp"
#include "valgate/routing.hpp"
#include "valgate/oracle_sim.hpp"
#include "valgate/run_config.hpp"
#include "valgate/pipeline.hpp"
