#pragma once

#include "steerkit/core.hpp"
#include "steerkit/data.hpp"
#include "steerkit/dsv.hpp"
#include "steerkit/engine.hpp"
#include "steerkit/eval.hpp"
#include "steerkit/probe.hpp"
#include "steerkit/steer.hpp"
#include "steerkit/config.hpp"
#include "steerkit/cli.hpp"
