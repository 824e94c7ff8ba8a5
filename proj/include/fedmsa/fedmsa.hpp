#pragma once

#include "fedmsa/baselines.hpp"
#include "fedmsa/datagen.hpp"
#include "fedmsa/errors.hpp"
#include "fedmsa/estimator_stats.hpp"
#include "fedmsa/experiment.hpp"
#include "fedmsa/instances.hpp"
#include "fedmsa/msa.hpp"
#include "fedmsa/neumann.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/parallel.hpp"
#include "fedmsa/rng.hpp"
#include "fedmsa/serialization.hpp"
