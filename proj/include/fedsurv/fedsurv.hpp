#pragma once

// Umbrella header: the whole library.

#include "fedsurv/errors.hpp"
#include "fedsurv/rng.hpp"
#include "fedsurv/survcore/types.hpp"
#include "fedsurv/survcore/nonparametric.hpp"
#include "fedsurv/survcore/cox.hpp"
#include "fedsurv/survcore/csv.hpp"
#include "fedsurv/nuisance/bundle.hpp"
#include "fedsurv/eif/h_functional.hpp"
#include "fedsurv/eif/influence.hpp"
#include "fedsurv/fedopt/aggregate.hpp"
#include "fedsurv/fednet/roles.hpp"
#include "fedsurv/simbench/monte_carlo.hpp"
