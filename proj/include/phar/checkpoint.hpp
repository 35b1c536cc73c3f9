#pragma once

#include <string>
#include <utility>
#include <vector>

#include "phar/config.hpp"
#include "phar/params.hpp"

namespace phar {

struct StoreRef {
    std::string name;  // prefix for tensor paths, e.g. "gen", "disc_f"
    ParamStore* store;
};

// Binary checkpoint: magic "PHRN", version, config snapshot, named f32
// tensors (little-endian), Adam state, RNG state, step counter. Round trips
// are bit-identical and the file is platform independent.
void save_checkpoint(const std::string& path, const TrainConfig& cfg,
                     const std::vector<StoreRef>& stores, const Rng& rng, int64_t step);

// Reads only the config snapshot, validating magic and version first.
TrainConfig peek_checkpoint_config(const std::string& path);

// Fills existing stores (matched by path, shapes must agree), Adam state,
// RNG and step counter.
void load_checkpoint(const std::string& path, const std::vector<StoreRef>& stores, Rng& rng,
                     int64_t& step);

// Writes a bare named-tensor file in the same container (no training state).
void save_named_tensors(const std::string& path,
                        const std::vector<std::pair<std::string, Tensor>>& tensors);

// Reads the tensor section of any checkpoint. A leading "gen." prefix is
// stripped so full training checkpoints can serve as encoder weight files.
std::vector<std::pair<std::string, Tensor>> load_named_tensors(const std::string& path);

}  // namespace phar
