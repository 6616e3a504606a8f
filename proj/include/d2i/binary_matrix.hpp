#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace d2i {

/// Row-major, bit-packed matrix of {0,1} indicators. Each row occupies a
/// whole number of 64-bit words so rows can be compared and combined
/// word-wise.
class BinaryMatrix {
 public:
  using Word = std::uint64_t;

  BinaryMatrix() = default;
  BinaryMatrix(std::size_t rows, std::size_t cols);

  /// Builds from strings of '0'/'1', one per row. Throws on ragged input.
  static BinaryMatrix from_strings(std::initializer_list<std::string> rows);
  static BinaryMatrix from_strings(const std::vector<std::string>& rows);

  /// Entries of `dense` are tested against 0.5.
  template <typename Derived>
  static BinaryMatrix from_dense(const Eigen::MatrixBase<Derived>& dense) {
    BinaryMatrix m(static_cast<std::size_t>(dense.rows()), static_cast<std::size_t>(dense.cols()));
    for (Eigen::Index i = 0; i < dense.rows(); ++i)
      for (Eigen::Index j = 0; j < dense.cols(); ++j)
        if (dense(i, j) > 0.5) m.set(static_cast<std::size_t>(i), static_cast<std::size_t>(j), true);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t words_per_row() const { return words_per_row_; }
  bool empty() const { return rows_ == 0 || cols_ == 0; }

  bool operator()(std::size_t i, std::size_t j) const {
    return (words_[i * words_per_row_ + j / 64] >> (j % 64)) & Word{1};
  }
  void set(std::size_t i, std::size_t j, bool value);

  std::span<const Word> row_words(std::size_t i) const {
    return {words_.data() + i * words_per_row_, words_per_row_};
  }
  std::span<Word> row_words(std::size_t i) {
    return {words_.data() + i * words_per_row_, words_per_row_};
  }

  std::string row_string(std::size_t i) const;

  std::size_t count_ones() const;
  std::size_t row_count(std::size_t i) const;
  std::vector<std::size_t> column_counts() const;

  /// Fraction of ones per column (length cols); zeros when rows == 0.
  Eigen::VectorXd column_prevalence() const;
  /// Fraction of ones per row (length rows).
  Eigen::VectorXd row_prevalence() const;

  /// Dense copy with entries 0 or 1.
  template <typename Scalar = double>
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> to_dense() const {
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(rows_, cols_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) out(i, j) = (*this)(i, j) ? Scalar(1) : Scalar(0);
    return out;
  }

  /// Rows in the given order (indices may repeat).
  BinaryMatrix select_rows(std::span<const std::size_t> indices) const;
  BinaryMatrix row_range(std::size_t begin, std::size_t end) const;

  /// Copy with column `col` cleared.
  BinaryMatrix with_zeroed_column(std::size_t col) const;

  /// Columns reordered so that out(:, k) = in(:, perm[k]).
  BinaryMatrix permute_columns(std::span<const std::size_t> perm) const;

  /// Elementwise a <= b.
  bool is_subset_of(const BinaryMatrix& other) const;

  friend bool operator==(const BinaryMatrix& a, const BinaryMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.words_ == b.words_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_per_row_ = 0;
  std::vector<Word> words_;
};

/// Hamming distance between row i of a and row j of b (same column count).
std::size_t hamming_distance(const BinaryMatrix& a, std::size_t i, const BinaryMatrix& b,
                             std::size_t j);

}  // namespace d2i
