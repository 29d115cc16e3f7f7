#pragma once

// Little-endian POD helpers shared by the binary formats.

#include "sdsae/error.hpp"

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts are not supported");

namespace sdsae::detail {

template <class T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
void put_span(std::ostream& out, std::span<const T> values) {
    out.write(reinterpret_cast<const char*>(values.data()), std::streamsize(values.size_bytes()));
}

template <class T>
T get(std::istream& in, const std::string& what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (in.gcount() != std::streamsize(sizeof(T))) throw FormatError("truncated " + what);
    return value;
}

template <class T>
void get_span(std::istream& in, std::span<T> values, const std::string& what) {
    in.read(reinterpret_cast<char*>(values.data()), std::streamsize(values.size_bytes()));
    if (in.gcount() != std::streamsize(values.size_bytes())) throw FormatError("truncated " + what);
}

}  // namespace sdsae::detail
