#pragma once

#include "upp/error.hpp"
#include "upp/rng.hpp"
#include "upp/unitary.hpp"
#include "upp/mesh.hpp"
#include "upp/thermal.hpp"
#include "upp/metrics.hpp"
#include "upp/device.hpp"
#include "upp/fringe.hpp"
#include "upp/routing.hpp"
#include "upp/jacobian.hpp"
#include "upp/trainset.hpp"
#include "upp/fit.hpp"
#include "upp/program.hpp"
#include "upp/pipeline.hpp"
#include "upp/io.hpp"
#include "upp/config.hpp"
