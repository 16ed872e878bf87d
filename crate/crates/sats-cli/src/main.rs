fn main() {
    println!("sats");
}
