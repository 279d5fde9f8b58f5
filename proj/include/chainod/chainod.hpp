#pragma once

#include "chainod/assignment.hpp"
#include "chainod/departure.hpp"
#include "chainod/errors.hpp"
#include "chainod/experiment.hpp"
#include "chainod/kalman.hpp"
#include "chainod/legs.hpp"
#include "chainod/network.hpp"
#include "chainod/pkf.hpp"
#include "chainod/report.hpp"
#include "chainod/rng.hpp"
#include "chainod/scenario.hpp"
