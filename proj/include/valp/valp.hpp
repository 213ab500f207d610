#pragma once

#include "valp/errors.hpp"
#include "valp/matrix.hpp"
#include "valp/rng.hpp"
#include "valp/nn.hpp"
#include "valp/graph.hpp"
#include "valp/model.hpp"
#include "valp/serialize.hpp"
#include "valp/random_model.hpp"
#include "valp/operators.hpp"
#include "valp/diagnostics.hpp"
#include "valp/search.hpp"
#include "valp/pareto.hpp"
#include "valp/data.hpp"
#include "valp/experiment.hpp"
