#pragma once

#include <cstdint>
#include <string>

namespace glint {

struct SynthOptions {
    std::string preset = "lambert-spheres";
    int views = 8;
    int size = 128;
    uint64_t seed = 0;
    int mc_samples = 1024;
    int lift_views = 24;
    int env_res = 64;
    int surfels_per_object = 900;
    bool biased_env = false;
};

}  // namespace glint
