#pragma once

#include "nmaborrow/core.hpp"
#include "nmaborrow/distributions.hpp"
#include "nmaborrow/mcmc.hpp"
#include "nmaborrow/nma.hpp"
#include "nmaborrow/borrowing.hpp"
#include "nmaborrow/priors.hpp"
#include "nmaborrow/evaluation.hpp"
