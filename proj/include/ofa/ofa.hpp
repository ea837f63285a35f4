#pragma once

#include "ofa/alphamod.hpp"
#include "ofa/cif.hpp"
#include "ofa/config.hpp"
#include "ofa/data_io.hpp"
#include "ofa/dataset.hpp"
#include "ofa/diffmath.hpp"
#include "ofa/error.hpp"
#include "ofa/losses.hpp"
#include "ofa/matrix.hpp"
#include "ofa/model.hpp"
#include "ofa/profile.hpp"
#include "ofa/rng.hpp"
#include "ofa/training.hpp"
