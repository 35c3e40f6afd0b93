#pragma once

#include "cohesion/cmf.hpp"
#include "cohesion/config.hpp"
#include "cohesion/data_ingest.hpp"
#include "cohesion/error.hpp"
#include "cohesion/eval.hpp"
#include "cohesion/graph.hpp"
#include "cohesion/matrix.hpp"
#include "cohesion/model.hpp"
#include "cohesion/rng.hpp"
#include "cohesion/run.hpp"
#include "cohesion/training.hpp"
