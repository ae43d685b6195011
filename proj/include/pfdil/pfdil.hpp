#pragma once

#include "pfdil/binary_io.hpp"
#include "pfdil/checkpoint.hpp"
#include "pfdil/client.hpp"
#include "pfdil/config.hpp"
#include "pfdil/data.hpp"
#include "pfdil/error.hpp"
#include "pfdil/evaluation.hpp"
#include "pfdil/experiment.hpp"
#include "pfdil/federation.hpp"
#include "pfdil/gradcheck.hpp"
#include "pfdil/matching.hpp"
#include "pfdil/nn.hpp"
#include "pfdil/rng.hpp"
#include "pfdil/state_io.hpp"
