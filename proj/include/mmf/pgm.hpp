#pragma once

#include <cstdint>
#include <string>

#include "mmf/grid.hpp"

namespace mmf {

/// Binary PGM (P5) codec. 16-bit samples are big-endian per the Netpbm spec.
void save_pgm8(const std::string& path, const Grid<uint8_t>& img);
Grid<uint8_t> load_pgm8(const std::string& path);
void save_pgm16(const std::string& path, const Grid<uint16_t>& img);
Grid<uint16_t> load_pgm16(const std::string& path);

}  // namespace mmf
