//! Doc-test bindings for the guide in `book/`.
//!
//! Each chapter's markdown is attached as documentation to a hidden item,
//! so `cargo test --doc` compiles and runs every Rust snippet in the book.
//! The items only exist while rustdoc collects doc-tests.

macro_rules! book_chapter {
    ($name:ident, $path:literal) => {
        #[cfg(doctest)]
        #[doc = include_str!($path)]
        pub struct $name;
    };
}

book_chapter!(Introduction, "../../../book/src/introduction.md");
book_chapter!(DataFormat, "../../../book/src/data-format.md");
book_chapter!(Kernels, "../../../book/src/kernels.md");
book_chapter!(Partitioning, "../../../book/src/partitioning.md");
book_chapter!(BlockMinimization, "../../../book/src/block-minimization.md");
book_chapter!(LineSearch, "../../../book/src/line-search.md");
book_chapter!(Communication, "../../../book/src/communication.md");
book_chapter!(Prediction, "../../../book/src/prediction.md");
book_chapter!(Convergence, "../../../book/src/convergence.md");
book_chapter!(Cli, "../../../book/src/cli.md");
