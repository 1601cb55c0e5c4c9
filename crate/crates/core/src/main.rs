fn main() {
    println!("gatefusion");
}
