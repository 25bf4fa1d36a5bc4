#pragma once

#include "ada/core.hpp"
#include "ada/diffcore.hpp"
#include "ada/densities.hpp"
#include "ada/flowgen.hpp"
#include "ada/observables.hpp"
#include "ada/critics.hpp"
#include "ada/metrics.hpp"
#include "ada/oracle.hpp"
#include "ada/align.hpp"
#include "ada/io.hpp"
#include "ada/config.hpp"
