#pragma once

#include <cstdint>
#include <string>

#include "mmkd/data.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/model.hpp"
#include "mmkd/trainer.hpp"

namespace mmkd::config {

// One experiment described as a structured-text document with four optional
// sections: model, data, train, distill. Every field of TrainConfig and
// DistillConfig is addressable by its own name; unknown keys anywhere are
// configuration errors rather than silent typos.
struct Experiment {
    model::ModelSpec teacher = model::teacher_spec();
    int student_keep_every = 2; // depth-pruning stride for the student init
    uint64_t init_seed = 2024;  // weight init for freshly created models
    model::VisualEncoderSpec encoder;
    data::GenConfig data;
    train::TrainConfig train;
    losses::DistillConfig distill;
};

// The encoder never has its own section: its grid mirrors the data grid, its
// width mirrors the model's visual_dim, and its remaining knobs (patch_pixels,
// encoder_seed) live in the model section.
Experiment parse_experiment(const std::string& text);
Experiment load_experiment(const std::string& path);

} // namespace mmkd::config
