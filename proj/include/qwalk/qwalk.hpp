#pragma once

#include "qwalk/common.hpp"
#include "qwalk/trigpoly.hpp"
#include "qwalk/models.hpp"
#include "qwalk/simulate.hpp"
#include "qwalk/spectral.hpp"
#include "qwalk/compare.hpp"
#include "qwalk/perturb.hpp"
#include "qwalk/io.hpp"
