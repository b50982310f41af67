#pragma once

#include "bpsig/errors.hpp"
#include "bpsig/rng.hpp"
#include "bpsig/network.hpp"
#include "bpsig/dynamics.hpp"
#include "bpsig/control.hpp"
#include "bpsig/analysis.hpp"
#include "bpsig/experiment.hpp"
