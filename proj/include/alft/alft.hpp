#pragma once

// Everything: the lifter, the synthetic gym, and the experiment helpers.

#include "alft/experiment.hpp"
