#pragma once

#include <cstdint>
#include <string_view>

namespace wadg {

/// Fans one master seed out to independent component streams:
/// splitmix64(master ^ fnv1a64(component)). Component names used by the
/// library are listed in the README.
std::uint64_t derive_seed(std::uint64_t master, std::string_view component);

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace wadg
