#pragma once

#include "checkpoint.hpp"
#include "conditioning.hpp"
#include "config.hpp"
#include "data.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "fourier.hpp"
#include "model.hpp"
#include "nca.hpp"
#include "params.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "trainer.hpp"
#include "training.hpp"
