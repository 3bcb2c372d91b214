#pragma once

// Umbrella header: differentiable surfel inverse rendering at desk scale.

#include "glint/camera.hpp"
#include "glint/cubemap.hpp"
#include "glint/envlight.hpp"
#include "glint/error.hpp"
#include "glint/image.hpp"
#include "glint/losses.hpp"
#include "glint/math.hpp"
#include "glint/metrics.hpp"
#include "glint/optimizer.hpp"
#include "glint/pipeline.hpp"
#include "glint/priors.hpp"
#include "glint/rasterizer.hpp"
#include "glint/scene.hpp"
#include "glint/shading.hpp"
#include "glint/synth.hpp"
