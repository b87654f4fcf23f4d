#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <variant>

#include "hts/tensor.hpp"

// Binary tensor file:
//   "HTST" | u16 version | u16 rank | u64 extents[rank] | u8 dtype | elements
// All integers and elements little-endian. dtype 1 = f32, 2 = f64.
namespace hts {

inline constexpr std::uint16_t kTensorFormatVersion = 1;

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

/// Reads one tensor of element type T. A stored dtype other than T is a
/// FormatError; so is any truncation or bad header.
template <typename T>
Tensor<T> read_tensor(std::istream& in);

/// Reads whichever dtype the stream holds.
std::variant<TensorF, TensorD> read_any_tensor(std::istream& in);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

// Little-endian primitives shared with the checkpoint format.
namespace le {
void write_u8(std::ostream& out, std::uint8_t v);
void write_u16(std::ostream& out, std::uint16_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint8_t read_u8(std::istream& in);
std::uint16_t read_u16(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
void read_exact(std::istream& in, char* dst, std::size_t n);
}  // namespace le

}  // namespace hts
