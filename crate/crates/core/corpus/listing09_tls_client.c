// TLS client: pass is set only when the server signature verifies, and
// read after the blocking receive loop.
int client_main(void) {
    int pass = 0;
    unsigned char message[32] = "message";

    client_fd = socket(AF_INET, SOCK_STREAM, 0);
    connect(client_fd, (struct sockaddr *)&server_addr, sizeof(server_addr));
    send(client_fd, message, sizeof(message), 0);
    bytes_received = recv(client_fd, buffer, sizeof(buffer), 0);
    signature = d2i_ECDSA_SIG(NULL, &pp, sig_len);
    if (verify_message(message, sizeof(message), signature, ec_key) == SUCCESS) {
        pass = 1;
    }
    EC_KEY_free(ec_key);
    ECDSA_SIG_free(signature);
    if (pass != 0) {
        fprintf(stdout, "Server Authenticated\n");
        fflush(stdout);
    }
    return 0;
}

// Same client with pass pinned to a register.
int client_main_register(void) {
    register int pass asm("rbx") = 0;

    bytes_received = recv(client_fd, buffer, sizeof(buffer), 0);
    if (verify_message(message, sizeof(message), signature, ec_key) == SUCCESS) {
        pass = 1;
    }
    if (pass != 0) {
        fprintf(stdout, "Server Authenticated\n");
    }
    return 0;
}
