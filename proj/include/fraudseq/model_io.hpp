#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fraudseq/model.hpp"

namespace fraudseq {

/// Model file: magic "FSQM", u32 version, u32 manifest length, manifest JSON
/// (config plus tensor names, shapes and dtype), then each tensor row-major
/// little-endian in manifest order.
template <class Scalar>
std::vector<std::uint8_t> serialize_params(const ModelParams<Scalar>& p);

/// expected, when given, must match the stored config exactly.
template <class Scalar>
ModelParams<Scalar> deserialize_params(std::span<const std::uint8_t> bytes,
                                       const ModelConfig* expected = nullptr);

template <class Scalar>
void save_params(const ModelParams<Scalar>& p, const std::string& path);

template <class Scalar>
ModelParams<Scalar> load_params(const std::string& path, const ModelConfig* expected = nullptr);

/// Reads only the manifest config, e.g. to pick the precision before loading.
ModelConfig peek_model_config(const std::string& path);

/// State value: u64 schema hash, u8 dtype (4 or 8), u8 has_ts, i64 last ts,
/// u32 layer count, then per layer u32 width and the floats.
template <class Scalar>
std::vector<std::uint8_t> encode_state(const EntityState<Scalar>& s, std::uint64_t schema_hash);

template <class Scalar>
EntityState<Scalar> decode_state(std::span<const std::uint8_t> bytes, std::uint64_t schema_hash);

/// Last-event timestamp straight from an encoded state, if it has one.
std::optional<TimestampMs> peek_state_timestamp(std::span<const std::uint8_t> bytes);

}  // namespace fraudseq
