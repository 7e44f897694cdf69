#pragma once

#include "black_scholes.hpp"
#include "controller.hpp"
#include "dynamics.hpp"
#include "errors.hpp"
#include "harness.hpp"
#include "kappa_map.hpp"
#include "localvol.hpp"
#include "market_shell.hpp"
#include "qp.hpp"
#include "risk_metrics.hpp"
#include "rng.hpp"
#include "verification.hpp"
#include "vix_engine.hpp"
