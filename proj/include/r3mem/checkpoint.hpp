#pragma once

// Binary checkpoint: magic "R3M1", u32 LE format version, length-prefixed
// config block (key=value lines), then named arrays sorted by name, each as
// name length (u32), name bytes, rank (u32), dims (u32 each), row-major f32 LE.

#include <string>

#include "r3mem/model.hpp"

namespace r3mem {

constexpr uint32_t CHECKPOINT_VERSION = 1;

void save_checkpoint(const std::string & path, RevformerParams<float> & params);

RevformerParams<float> load_checkpoint_f32(const std::string & path);

template <typename T>
RevformerParams<T> load_checkpoint(const std::string & path);

template <>
inline RevformerParams<float> load_checkpoint<float>(const std::string & path) {
    return load_checkpoint_f32(path);
}

template <>
inline RevformerParams<double> load_checkpoint<double>(const std::string & path) {
    return load_checkpoint_f32(path).cast<double>();
}

} // namespace r3mem
