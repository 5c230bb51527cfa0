#include "rsc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace rsc {

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
        throw ShapeError("tensor: shape " + to_string(shape_) + " holds " +
                         std::to_string(element_count(shape_)) + " elements but " +
                         std::to_string(data_.size()) + " values were given");
    }
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("item: expected a one-element tensor, got shape " + to_string(shape_));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
        throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > shape_[0]) {
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside shape " + to_string(shape_));
    }
    const std::size_t row = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape out_shape = shape_;
    out_shape[0] = end - begin;
    std::vector<double> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                            data_.begin() + static_cast<std::ptrdiff_t>(end * row));
    return Tensor(std::move(out_shape), std::move(out));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
    if (shape_.empty()) throw ShapeError("gather_rows: scalar-shaped tensor");
    const std::size_t row = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape out_shape = shape_;
    out_shape[0] = rows.size();
    std::vector<double> out;
    out.reserve(rows.size() * row);
    for (auto r : rows) {
        if (r >= shape_[0]) {
            throw ShapeError("gather_rows: row " + std::to_string(r) + " outside shape " + to_string(shape_));
        }
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(r * row);
        out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(row));
    }
    return Tensor(std::move(out_shape), std::move(out));
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace rsc
