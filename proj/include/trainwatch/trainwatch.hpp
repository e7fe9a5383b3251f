// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "trainwatch/error.hpp"
#include "trainwatch/rng.hpp"
#include "trainwatch/io.hpp"
#include "trainwatch/stats.hpp"
#include "trainwatch/telemetry.hpp"
#include "trainwatch/symptoms.hpp"
#include "trainwatch/dataset.hpp"
#include "trainwatch/injectors.hpp"
#include "trainwatch/toytrainer.hpp"
#include "trainwatch/xai.hpp"
#include "trainwatch/matrix_io.hpp"
#include "trainwatch/config.hpp"
#include "trainwatch/report.hpp"
#include "trainwatch/watch.hpp"
