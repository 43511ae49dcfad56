int client_main(void) {
    int pass = 0;

    bytes_received = recv(client_fd, buffer, sizeof(buffer), 0);
    if (verify_message(message, sizeof(message), signature, ec_key) == SUCCESS) {
        pass = 0x3c96e35a;
    }
    if (pass == 0x3c96e35a) {
        fprintf(stdout, "Server Authenticated\n");
    }
    return 0;
}
