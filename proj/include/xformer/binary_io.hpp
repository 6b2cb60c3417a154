#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "xformer/tensor.hpp"

// Little-endian record helpers shared by the sample stream and checkpoints.
namespace xf::io {

class Writer {
public:
    void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) u32(static_cast<std::uint32_t>(d));
        for (double v : t.data()) f64(v);
    }
    void bools(const std::vector<bool>& b) {
        u32(static_cast<std::uint32_t>(b.size()));
        for (bool x : b) u8(x ? 1 : 0);
    }
    void raw(const char* p, std::size_t n) { out_.append(p, n); }
    void str(const std::string& s) {
        u64(s.size());
        out_ += s;
    }
    std::size_t size() const { return out_.size(); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class Reader {
public:
    Reader(const std::string& s, std::string tag) : s_(s), tag_(std::move(tag)) {}
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(s_[pos_++]);
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    Tensor tensor() {
        const std::uint32_t rank = u32();
        if (rank == 0 || rank > 4) throw FormatError(tag_ + ": bad tensor rank " + std::to_string(rank));
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(u32());
        const std::size_t n = shape_numel(shape);
        need(n * 8);
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return Tensor::from(std::move(shape), std::move(v));
    }
    std::vector<bool> bools() {
        const std::uint32_t n = u32();
        need(n);
        std::vector<bool> b(n);
        for (std::uint32_t i = 0; i < n; ++i) b[i] = u8() != 0;
        return b;
    }
    void expect(const char* p, std::size_t n) {
        need(n);
        if (s_.compare(pos_, n, p, n) != 0) throw FormatError(tag_ + ": bad magic");
        pos_ += n;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    std::size_t position() const { return pos_; }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        if (s_.size() - pos_ < n) throw FormatError(tag_ + ": truncated record");
    }
    const std::string& s_;
    std::string tag_;
    std::size_t pos_ = 0;
};

}  // namespace xf::io
