fn main() {
    // Placeholder while the library is under construction.
}
